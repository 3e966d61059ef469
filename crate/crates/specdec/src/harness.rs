//! Experiment driver: corpus ingestion and seeded splits, model training,
//! feature extraction, classifier training, grid-search tuning of every
//! policy family on the validation split, the policy comparison run, and
//! report emission. Batch generation over prompts runs in parallel when the
//! `parallel` feature is enabled; per-prompt seeds derive from the master
//! seed so parallelism never changes results.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{cost_latency, oracle_stats, CostModel, OracleStats};
use crate::classifier::{
    extract_features, f1_eval, features_from_jsonl, features_to_jsonl, train, ExtractConfig,
    FfnParams, LabelMode, LabeledFeature, TrainConfig,
};
use crate::dist::TokenId;
use crate::engine::{
    autoregressive_generate, oracle_generate, speculative_generate, GenerationConfig, RunTrace,
};
use crate::models::{train_ngram, ModelPair, NGramModel, Vocab};
use crate::policies::{
    DiscoPolicy, HeuristicPolicy, PerplexityPolicy, PositionMode, StaticPolicy,
};
use crate::{Error, Result};

/// Environment variable overriding the configured output directory.
pub const OUT_DIR_ENV: &str = "SPECDEC_OUT_DIR";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

fn d_train() -> usize { 240 }
fn d_valid() -> usize { 80 }
fn d_test() -> usize { 80 }
fn d_target_order() -> usize { 4 }
fn d_draft_order() -> usize { 2 }
fn d_alpha() -> f64 { 0.2 }
fn d_k() -> usize { 10 }
fn d_sl_max_candidates() -> Vec<usize> { vec![2, 4, 6, 8] }
fn d_tau_grid() -> Vec<f64> { vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9] }
fn d_static_grid() -> Vec<usize> { (1..=10).collect() }
fn d_ppl_tau_grid() -> Vec<f64> { vec![1.2, 1.5, 2.0, 3.0, 5.0, 8.0] }
fn d_default_sl_max() -> usize { 8 }
fn d_cost_c() -> f64 { 0.1 }
fn d_prompt_len() -> usize { 12 }
fn d_max_new_tokens() -> usize { 64 }
fn d_heuristic_init() -> usize { 5 }
fn d_heuristic_step_up() -> usize { 2 }
fn d_heuristic_step_down() -> usize { 1 }
fn d_heuristic_min_sl() -> usize { 1 }
fn d_learning_rate() -> f64 { 0.05 }
fn d_epochs() -> usize { 200 }
fn d_batch_size() -> usize { 64 }
fn d_hidden_dim() -> usize { 32 }
fn d_label_mode() -> LabelMode { LabelMode::Hard }
fn d_position_mode() -> PositionMode { PositionMode::Iteration }
fn d_normalize_position() -> bool { true }
fn d_bucket_size() -> f64 { 0.0001 }
fn d_out_dir() -> PathBuf { PathBuf::from("out") }

/// Everything one experiment needs, loadable from a TOML file; every field
/// has a documented default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus_path: PathBuf,
    /// Output directory for artifacts; `SPECDEC_OUT_DIR` overrides it.
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "d_train")]
    pub train_count: usize,
    #[serde(default = "d_valid")]
    pub valid_count: usize,
    #[serde(default = "d_test")]
    pub test_count: usize,
    #[serde(default = "d_target_order")]
    pub target_order: usize,
    #[serde(default = "d_draft_order")]
    pub draft_order: usize,
    /// Laplace smoothing constant for both n-gram models.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Feature width: number of top probabilities fed to the classifier.
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_sl_max_candidates")]
    pub sl_max_candidates: Vec<usize>,
    #[serde(default = "d_tau_grid")]
    pub tau_grid: Vec<f64>,
    #[serde(default = "d_static_grid")]
    pub static_grid: Vec<usize>,
    #[serde(default = "d_ppl_tau_grid")]
    pub ppl_tau_grid: Vec<f64>,
    /// Iteration cap for the policies that do not tune their own cap
    /// (heuristic, perplexity) and the scale for position normalization.
    #[serde(default = "d_default_sl_max")]
    pub default_sl_max: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    /// Cost coefficient: draft forward walltime relative to target.
    #[serde(default = "d_cost_c")]
    pub cost_c: f64,
    #[serde(default)]
    pub target_unit_ms: Option<f64>,
    /// Characters of each corpus line used as the prompt.
    #[serde(default = "d_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "d_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "d_heuristic_init")]
    pub heuristic_init: usize,
    #[serde(default = "d_heuristic_step_up")]
    pub heuristic_step_up: usize,
    #[serde(default = "d_heuristic_step_down")]
    pub heuristic_step_down: usize,
    #[serde(default = "d_heuristic_min_sl")]
    pub heuristic_min_sl: usize,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "d_label_mode")]
    pub label_mode: LabelMode,
    /// Position the classifier's position feature counts at inference time.
    #[serde(default = "d_position_mode")]
    pub position_mode: PositionMode,
    /// Divide the position feature by `default_sl_max` before it enters the
    /// network.
    #[serde(default = "d_normalize_position")]
    pub normalize_position: bool,
    /// Bucket width for the normalized-iteration-index oracle statistics.
    #[serde(default = "d_bucket_size")]
    pub bucket_size: f64,
    /// Load the classifier from this path instead of the output directory
    /// (transfer-learning runs).
    #[serde(default)]
    pub classifier_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn with_defaults(corpus_path: PathBuf) -> Self {
        toml::from_str(&format!("corpus_path = {:?}", corpus_path.to_string_lossy()))
            .expect("default config parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            cfg.out_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sl_max_candidates.is_empty()
            || self.tau_grid.is_empty()
            || self.static_grid.is_empty()
            || self.ppl_tau_grid.is_empty()
        {
            return Err(Error::InvalidArgument("hyperparameter grids must be non-empty".into()));
        }
        if self.prompt_len == 0 || self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("prompt_len and max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel { c: self.cost_c, target_unit_ms: self.target_unit_ms }
    }

    fn position_scale(&self) -> Option<f64> {
        self.normalize_position.then_some(self.default_sl_max as f64)
    }

    fn gen_config(&self, seed: u64, sl_max: usize) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            seed,
            sl_max,
        }
    }
}

// ---------------------------------------------------------------------------
// Corpus and splits
// ---------------------------------------------------------------------------

/// Non-empty lines of a UTF-8 text file, one prompt source per line.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<String> = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect();
    if lines.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(lines)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

/// Deterministic seeded shuffle split into disjoint train/valid/test sets.
pub fn split_corpus(lines: &[String], cfg: &ExperimentConfig) -> Result<Splits> {
    let need = cfg.train_count + cfg.valid_count + cfg.test_count;
    if lines.len() < need {
        return Err(Error::CorpusTooSmall { need, have: lines.len() });
    }
    let mut idx: Vec<usize> = (0..lines.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    idx.shuffle(&mut rng);
    let take = |range: std::ops::Range<usize>| range.map(|i| lines[idx[i]].clone()).collect();
    Ok(Splits {
        train: take(0..cfg.train_count),
        valid: take(cfg.train_count..cfg.train_count + cfg.valid_count),
        test: take(cfg.train_count + cfg.valid_count..need),
    })
}

/// Prompt tokens for each line: the first `prompt_len` characters.
pub fn prompts_from_lines(vocab: &Vocab, lines: &[String], prompt_len: usize) -> Result<Vec<Vec<TokenId>>> {
    lines
        .iter()
        .map(|l| {
            let prefix: String = l.chars().take(prompt_len).collect();
            vocab.encode(&prefix)
        })
        .collect()
}

/// Trains the target/draft n-gram pair on the training split, with the
/// vocabulary built over the whole corpus so every split tokenizes.
pub fn train_pair(
    all_lines: &[String],
    train_lines: &[String],
    cfg: &ExperimentConfig,
) -> Result<ModelPair<NGramModel, NGramModel>> {
    let vocab = Vocab::from_corpus(all_lines);
    let corpus: Vec<Vec<TokenId>> = train_lines
        .iter()
        .map(|l| vocab.encode(l))
        .collect::<Result<_>>()?;
    let target = train_ngram(&corpus, cfg.target_order, cfg.alpha, vocab.clone())?;
    let draft = train_ngram(&corpus, cfg.draft_order, cfg.alpha, vocab)?;
    ModelPair::new(target, draft)
}

// ---------------------------------------------------------------------------
// Batch generation
// ---------------------------------------------------------------------------

/// Per-prompt seed derived from the master seed; independent of evaluation
/// order and parallelism.
pub fn derive_seed(master: u64, prompt_index: usize) -> u64 {
    master ^ (prompt_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Sequential prompt map, always available (benchmark baseline).
pub fn map_prompts_seq<T, F>(prompts: &[Vec<TokenId>], f: F) -> Vec<T>
where
    F: Fn(usize, &[TokenId]) -> T,
{
    prompts.iter().enumerate().map(|(i, p)| f(i, p)).collect()
}

/// Data-parallel prompt map over the rayon pool.
#[cfg(feature = "parallel")]
pub fn map_prompts_par<T, F>(prompts: &[Vec<TokenId>], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &[TokenId]) -> T + Sync,
{
    use rayon::prelude::*;
    prompts.par_iter().enumerate().map(|(i, p)| f(i, p)).collect()
}

/// Maps prompts with the parallel pool when the `parallel` feature is
/// enabled, sequentially otherwise.
pub fn map_prompts<T, F>(prompts: &[Vec<TokenId>], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &[TokenId]) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        map_prompts_par(prompts, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_prompts_seq(prompts, f)
    }
}

/// A policy family with fixed hyperparameters, ready to run over prompts.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    /// Target-only autoregressive baseline.
    TargetOnly,
    Static { gamma: usize, label: String },
    Heuristic,
    Perplexity { tau_ppl: f64 },
    Disco { ffn: FfnParams, tau: f64, sl_max: usize },
    Oracle,
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::TargetOnly => "target".into(),
            PolicySpec::Static { label, .. } => label.clone(),
            PolicySpec::Heuristic => "dyn-heuristic".into(),
            PolicySpec::Perplexity { .. } => "ppl-sl-opt".into(),
            PolicySpec::Disco { .. } => "disco".into(),
            PolicySpec::Oracle => "oracle".into(),
        }
    }
}

/// Runs one policy over all prompts with per-prompt derived seeds.
pub fn run_policy<T, D>(
    pair: &ModelPair<T, D>,
    prompts: &[Vec<TokenId>],
    spec: &PolicySpec,
    cfg: &ExperimentConfig,
) -> Result<Vec<RunTrace>>
where
    T: crate::models::LanguageModel + Sync,
    D: crate::models::LanguageModel + Sync,
{
    let results = map_prompts(prompts, |i, prompt| {
        let seed = derive_seed(cfg.seed, i);
        match spec {
            PolicySpec::TargetOnly => {
                autoregressive_generate(&pair.target, prompt, &cfg.gen_config(seed, 1))
            }
            PolicySpec::Static { gamma, .. } => {
                let mut policy = StaticPolicy::new(*gamma);
                speculative_generate(pair, prompt, &mut policy, &cfg.gen_config(seed, *gamma))
            }
            PolicySpec::Heuristic => {
                let mut policy = HeuristicPolicy::new(
                    cfg.heuristic_init,
                    cfg.heuristic_step_up,
                    cfg.heuristic_step_down,
                    cfg.heuristic_min_sl,
                );
                speculative_generate(pair, prompt, &mut policy, &cfg.gen_config(seed, cfg.default_sl_max))
            }
            PolicySpec::Perplexity { tau_ppl } => {
                let mut policy = PerplexityPolicy::new(*tau_ppl);
                speculative_generate(pair, prompt, &mut policy, &cfg.gen_config(seed, cfg.default_sl_max))
            }
            PolicySpec::Disco { ffn, tau, sl_max } => {
                let mut policy = DiscoPolicy::new(
                    ffn.clone(),
                    *tau,
                    *sl_max,
                    cfg.k,
                    cfg.position_mode,
                    cfg.position_scale(),
                )?;
                speculative_generate(pair, prompt, &mut policy, &cfg.gen_config(seed, *sl_max))
            }
            PolicySpec::Oracle => {
                oracle_generate(pair, prompt, &cfg.gen_config(seed, cfg.default_sl_max))
            }
        }
    });
    results.into_iter().collect()
}

fn total_cost(traces: &[RunTrace], cm: &CostModel) -> f64 {
    traces.iter().map(|t| cost_latency(t, cm)).sum()
}

// ---------------------------------------------------------------------------
// Tuning
// ---------------------------------------------------------------------------

/// Hyperparameters picked on the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedParams {
    pub format_version: u32,
    pub gamma_static: usize,
    pub tau: f64,
    pub sl_max: usize,
    pub tau_ppl: f64,
}

/// Exhaustive grid search minimizing total modeled cost-latency on the
/// validation prompts, independently per policy family. Ties break toward
/// the smaller value, with tau taking precedence over sl_max for the
/// classifier grid.
pub fn tune<T, D>(
    valid_prompts: &[Vec<TokenId>],
    pair: &ModelPair<T, D>,
    ffn: &FfnParams,
    cfg: &ExperimentConfig,
) -> Result<TunedParams>
where
    T: crate::models::LanguageModel + Sync,
    D: crate::models::LanguageModel + Sync,
{
    let cm = cfg.cost_model();
    let mut gammas = cfg.static_grid.clone();
    gammas.sort_unstable();
    let mut best_static: Option<(f64, usize)> = None;
    for &gamma in &gammas {
        let spec = PolicySpec::Static { gamma, label: format!("static-sl-{gamma}") };
        let cost = total_cost(&run_policy(pair, valid_prompts, &spec, cfg)?, &cm);
        if best_static.is_none_or(|(c, _)| cost < c) {
            best_static = Some((cost, gamma));
        }
    }

    let mut taus = cfg.tau_grid.clone();
    taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut sl_maxes = cfg.sl_max_candidates.clone();
    sl_maxes.sort_unstable();
    let mut best_disco: Option<(f64, f64, usize)> = None;
    for &tau in &taus {
        for &sl_max in &sl_maxes {
            let spec = PolicySpec::Disco { ffn: ffn.clone(), tau, sl_max };
            let cost = total_cost(&run_policy(pair, valid_prompts, &spec, cfg)?, &cm);
            if best_disco.is_none_or(|(c, _, _)| cost < c) {
                best_disco = Some((cost, tau, sl_max));
            }
        }
    }

    let mut ppl_taus = cfg.ppl_tau_grid.clone();
    ppl_taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best_ppl: Option<(f64, f64)> = None;
    for &tau_ppl in &ppl_taus {
        let spec = PolicySpec::Perplexity { tau_ppl };
        let cost = total_cost(&run_policy(pair, valid_prompts, &spec, cfg)?, &cm);
        if best_ppl.is_none_or(|(c, _)| cost < c) {
            best_ppl = Some((cost, tau_ppl));
        }
    }

    let (_, gamma_static) = best_static.expect("static grid non-empty");
    let (_, tau, sl_max) = best_disco.expect("disco grids non-empty");
    let (_, tau_ppl) = best_ppl.expect("perplexity grid non-empty");
    Ok(TunedParams { format_version: 1, gamma_static, tau, sl_max, tau_ppl })
}

// ---------------------------------------------------------------------------
// Comparison run and report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyRow {
    pub policy: String,
    pub total_cost: f64,
    pub per_token_cost: f64,
    /// Relative to the target-only row.
    pub speedup: f64,
    /// Pooled acceptance rate (zero for the target-only row).
    pub alpha: f64,
    /// Mean tokens drafted per speculative iteration.
    pub mean_sl: f64,
    pub target_forwards: usize,
    pub draft_forwards: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct F1Row {
    pub method: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub rows: Vec<PolicyRow>,
    pub f1: Vec<F1Row>,
    pub tuned: TunedParams,
    /// DISCO total cost over the static-SL-opt total cost.
    pub disco_static_opt_ratio: f64,
}

fn summarize(policy: String, traces: &[RunTrace], cm: &CostModel, target_cost: f64) -> PolicyRow {
    let total = total_cost(traces, cm);
    let emitted: usize = traces.iter().map(|t| t.output.len()).sum();
    let drafted: usize = traces.iter().map(RunTrace::total_drafted).sum();
    let accepted: usize = traces.iter().map(RunTrace::total_accepted).sum();
    let spec_iters = traces
        .iter()
        .flat_map(|t| &t.iterations)
        .filter(|it| it.sl_used > 0)
        .count();
    PolicyRow {
        policy,
        total_cost: total,
        per_token_cost: total / emitted as f64,
        speedup: target_cost / total,
        alpha: if drafted == 0 { 0.0 } else { accepted as f64 / drafted as f64 },
        mean_sl: if spec_iters == 0 { 0.0 } else { drafted as f64 / spec_iters as f64 },
        target_forwards: traces.iter().map(RunTrace::total_target_forwards).sum(),
        draft_forwards: traces.iter().map(RunTrace::total_draft_forwards).sum(),
    }
}

/// The policy lineup of a comparison run, in report order.
pub fn comparison_specs(ffn: &FfnParams, tuned: &TunedParams) -> Vec<PolicySpec> {
    vec![
        PolicySpec::TargetOnly,
        PolicySpec::Heuristic,
        PolicySpec::Static { gamma: 5, label: "static-sl-5".into() },
        PolicySpec::Static {
            gamma: tuned.gamma_static,
            label: "static-sl-opt".into(),
        },
        PolicySpec::Perplexity { tau_ppl: tuned.tau_ppl },
        PolicySpec::Disco { ffn: ffn.clone(), tau: tuned.tau, sl_max: tuned.sl_max },
        PolicySpec::Oracle,
    ]
}

/// Static halting rule as a token-level predictor: within repeating blocks
/// of `gamma` drafted tokens, the first `gamma − 1` predict "continue" and
/// the block's last token predicts "halt".
pub fn static_rule_predictions(gamma: usize, n: usize) -> Vec<bool> {
    (0..n).map(|i| (i % gamma) + 1 < gamma).collect()
}

/// F1 of the trained classifier at threshold `tau` against the binary
/// agreement labels, plus the best static-rule F1 over the static grid.
pub fn evaluate_f1(
    features: &[LabeledFeature],
    ffn: &FfnParams,
    tau: f64,
    static_grid: &[usize],
) -> Result<Vec<F1Row>> {
    let labels: Vec<bool> = features.iter().map(|f| f.accept_label).collect();
    let preds: Vec<bool> = features
        .iter()
        .map(|f| ffn.forward_features(&f.features).map(|c| c >= tau))
        .collect::<Result<_>>()?;
    let (p, r, f1) = f1_eval(&preds, &labels)?;
    let mut rows = vec![F1Row { method: "disco".into(), precision: p, recall: r, f1 }];

    let mut best: Option<F1Row> = None;
    for &gamma in static_grid {
        let preds = static_rule_predictions(gamma, labels.len());
        let (p, r, f1) = f1_eval(&preds, &labels)?;
        let row = F1Row { method: format!("static-sl-{gamma}"), precision: p, recall: r, f1 };
        if best.as_ref().is_none_or(|b| row.f1 > b.f1) {
            best = Some(row);
        }
    }
    rows.push(best.expect("static grid non-empty"));
    Ok(rows)
}

/// Per-policy traces from a comparison run, keyed by policy name.
pub type PolicyTraces = Vec<(String, Vec<RunTrace>)>;

/// Evaluates every policy on identical test prompts and seeds and builds
/// the comparison report. Returns the per-policy traces alongside it.
pub fn run_comparison<T, D>(
    test_prompts: &[Vec<TokenId>],
    pair: &ModelPair<T, D>,
    ffn: &FfnParams,
    tuned: &TunedParams,
    valid_features: &[LabeledFeature],
    cfg: &ExperimentConfig,
) -> Result<(Report, PolicyTraces)>
where
    T: crate::models::LanguageModel + Sync,
    D: crate::models::LanguageModel + Sync,
{
    let cm = cfg.cost_model();
    let mut all: PolicyTraces = Vec::new();
    for spec in comparison_specs(ffn, tuned) {
        let traces = run_policy(pair, test_prompts, &spec, cfg)?;
        all.push((spec.name(), traces));
    }
    let target_cost = total_cost(&all[0].1, &cm);
    let rows: Vec<PolicyRow> = all
        .iter()
        .map(|(name, traces)| summarize(name.clone(), traces, &cm, target_cost))
        .collect();
    let cost_of = |name: &str| {
        rows.iter()
            .find(|r| r.policy == name)
            .map(|r| r.total_cost)
            .expect("row present")
    };
    let ratio = cost_of("disco") / cost_of("static-sl-opt");
    let f1 = evaluate_f1(valid_features, ffn, tuned.tau, &cfg.static_grid)?;
    let report = Report {
        format_version: 1,
        rows,
        f1,
        tuned: tuned.clone(),
        disco_static_opt_ratio: ratio,
    };
    Ok((report, all))
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "# specdec-report-v1\npolicy,total_cost,per_token_cost,speedup,alpha,mean_sl,target_forwards,draft_forwards\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.policy,
                r.total_cost,
                r.per_token_cost,
                r.speedup,
                r.alpha,
                r.mean_sl,
                r.target_forwards,
                r.draft_forwards
            ));
        }
        s
    }

    pub fn f1_csv(&self) -> String {
        let mut s = String::from("# specdec-f1-v1\nmethod,precision,recall,f1\n");
        for r in &self.f1 {
            s.push_str(&format!("{},{},{},{}\n", r.method, r.precision, r.recall, r.f1));
        }
        s
    }

    /// Human-readable table mirroring the comparison layout, with the
    /// DISCO versus static-SL-opt cost ratio spelled out.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<16} {:>12} {:>10} {:>9} {:>7} {:>8}\n",
            "policy", "total_cost", "per_token", "speedup", "alpha", "mean_sl"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<16} {:>12.3} {:>10.4} {:>8.2}x {:>7.3} {:>8.2}\n",
                r.policy, r.total_cost, r.per_token_cost, r.speedup, r.alpha, r.mean_sl
            ));
        }
        s.push_str(&format!(
            "\ntuned: static gamma={} tau={} sl_max={} tau_ppl={}\n",
            self.tuned.gamma_static, self.tuned.tau, self.tuned.sl_max, self.tuned.tau_ppl
        ));
        for r in &self.f1 {
            s.push_str(&format!(
                "f1[{}]: precision={:.3} recall={:.3} f1={:.3}\n",
                r.method, r.precision, r.recall, r.f1
            ));
        }
        s.push_str(&format!(
            "disco/static-opt cost ratio: {:.4}\n",
            self.disco_static_opt_ratio
        ));
        s
    }
}

// ---------------------------------------------------------------------------
// Pipeline stages (artifact-file granularity used by the CLI)
// ---------------------------------------------------------------------------

pub const TARGET_MODEL_FILE: &str = "target-model.json";
pub const DRAFT_MODEL_FILE: &str = "draft-model.json";
pub const FEATURES_TRAIN_FILE: &str = "features-train.jsonl";
pub const FEATURES_VALID_FILE: &str = "features-valid.jsonl";
pub const CLASSIFIER_FILE: &str = "classifier.ffn";
pub const TUNED_FILE: &str = "tuned.json";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const F1_CSV_FILE: &str = "f1.csv";
pub const ORACLE_HIST_FILE: &str = "oracle-hist.csv";
pub const ORACLE_BUCKETS_FILE: &str = "oracle-buckets.csv";

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.out_dir.clone())
}

fn load_pair(cfg: &ExperimentConfig) -> Result<ModelPair<NGramModel, NGramModel>> {
    let target = NGramModel::load(&cfg.out_dir.join(TARGET_MODEL_FILE))?;
    let draft = NGramModel::load(&cfg.out_dir.join(DRAFT_MODEL_FILE))?;
    ModelPair::new(target, draft)
}

fn load_classifier(cfg: &ExperimentConfig) -> Result<FfnParams> {
    let path = cfg
        .classifier_path
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(CLASSIFIER_FILE));
    FfnParams::load(&path)
}

fn extract_config(cfg: &ExperimentConfig) -> ExtractConfig {
    ExtractConfig {
        k: cfg.k,
        max_new_tokens: cfg.max_new_tokens,
        position_normalize_by: cfg.normalize_position.then_some(cfg.default_sl_max as f64),
    }
}

/// Trains the n-gram pair on the training split and writes both model files.
pub fn stage_train_models(cfg: &ExperimentConfig) -> Result<()> {
    let out = ensure_out_dir(cfg)?;
    let lines = load_corpus(&cfg.corpus_path)?;
    let splits = split_corpus(&lines, cfg)?;
    let pair = train_pair(&lines, &splits.train, cfg)?;
    pair.target.save(&out.join(TARGET_MODEL_FILE))?;
    pair.draft.save(&out.join(DRAFT_MODEL_FILE))?;
    Ok(())
}

/// Teacher-forced feature extraction over the train and validation splits.
pub fn stage_extract_features(cfg: &ExperimentConfig) -> Result<()> {
    let out = ensure_out_dir(cfg)?;
    let lines = load_corpus(&cfg.corpus_path)?;
    let splits = split_corpus(&lines, cfg)?;
    let pair = load_pair(cfg)?;
    let ecfg = extract_config(cfg);
    let train_prompts = prompts_from_lines(pair.vocab(), &splits.train, cfg.prompt_len)?;
    let valid_prompts = prompts_from_lines(pair.vocab(), &splits.valid, cfg.prompt_len)?;
    let train_feats = extract_features(&pair, &train_prompts, &ecfg)?;
    let valid_feats = extract_features(&pair, &valid_prompts, &ecfg)?;
    fs::write(out.join(FEATURES_TRAIN_FILE), features_to_jsonl(&train_feats))?;
    fs::write(out.join(FEATURES_VALID_FILE), features_to_jsonl(&valid_feats))?;
    Ok(())
}

/// Trains the halting classifier on the extracted training features.
pub fn stage_train_classifier(cfg: &ExperimentConfig) -> Result<()> {
    let out = ensure_out_dir(cfg)?;
    let feats = features_from_jsonl(&fs::read_to_string(out.join(FEATURES_TRAIN_FILE))?)?;
    let tcfg = TrainConfig {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        hidden_dim: cfg.hidden_dim,
        label_mode: cfg.label_mode,
    };
    let ffn = train(&feats, &tcfg)?;
    ffn.save(&out.join(CLASSIFIER_FILE))?;
    Ok(())
}

/// Grid-search tuning on the validation split; writes the tuned parameters.
pub fn stage_tune(cfg: &ExperimentConfig) -> Result<TunedParams> {
    let out = ensure_out_dir(cfg)?;
    let lines = load_corpus(&cfg.corpus_path)?;
    let splits = split_corpus(&lines, cfg)?;
    let pair = load_pair(cfg)?;
    let ffn = load_classifier(cfg)?;
    let valid_prompts = prompts_from_lines(pair.vocab(), &splits.valid, cfg.prompt_len)?;
    let tuned = tune(&valid_prompts, &pair, &ffn, cfg)?;
    fs::write(
        out.join(TUNED_FILE),
        serde_json::to_string_pretty(&tuned).expect("tuned params serialize"),
    )?;
    Ok(tuned)
}

/// Full comparison run on the test split; writes the report, CSVs, and
/// per-policy trace files.
pub fn stage_run(cfg: &ExperimentConfig) -> Result<Report> {
    let out = ensure_out_dir(cfg)?;
    let lines = load_corpus(&cfg.corpus_path)?;
    let splits = split_corpus(&lines, cfg)?;
    let pair = load_pair(cfg)?;
    let ffn = load_classifier(cfg)?;
    let tuned: TunedParams = serde_json::from_str(&fs::read_to_string(out.join(TUNED_FILE))?)
        .map_err(|e| Error::Format(e.to_string()))?;
    let valid_feats = features_from_jsonl(&fs::read_to_string(out.join(FEATURES_VALID_FILE))?)?;
    let test_prompts = prompts_from_lines(pair.vocab(), &splits.test, cfg.prompt_len)?;
    let (report, traces) = run_comparison(&test_prompts, &pair, &ffn, &tuned, &valid_feats, cfg)?;
    let trace_dir = out.join("traces");
    fs::create_dir_all(&trace_dir)?;
    for (name, policy_traces) in &traces {
        let mut body = String::from("{\"format_version\":1,\"kind\":\"traces\"}\n");
        for t in policy_traces {
            body.push_str(&serde_json::to_string(t).expect("trace serializes"));
            body.push('\n');
        }
        fs::write(trace_dir.join(format!("{name}.jsonl")), body)?;
    }
    fs::write(
        out.join(REPORT_JSON_FILE),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    fs::write(out.join(REPORT_CSV_FILE), report.to_csv())?;
    fs::write(out.join(F1_CSV_FILE), report.f1_csv())?;
    Ok(report)
}

/// Oracle runs over the test split; writes histogram and bucket-mean CSVs.
pub fn stage_oracle_stats(cfg: &ExperimentConfig) -> Result<OracleStats> {
    let out = ensure_out_dir(cfg)?;
    let lines = load_corpus(&cfg.corpus_path)?;
    let splits = split_corpus(&lines, cfg)?;
    let pair = load_pair(cfg)?;
    let test_prompts = prompts_from_lines(pair.vocab(), &splits.test, cfg.prompt_len)?;
    let traces = run_policy(&pair, &test_prompts, &PolicySpec::Oracle, cfg)?;
    let stats = oracle_stats(&traces, cfg.bucket_size)?;
    fs::write(out.join(ORACLE_HIST_FILE), stats.histogram_csv())?;
    fs::write(out.join(ORACLE_BUCKETS_FILE), stats.bucket_means_csv())?;
    Ok(stats)
}

/// Loads the previously written report.
pub fn load_report(cfg: &ExperimentConfig) -> Result<Report> {
    let text = fs::read_to_string(cfg.out_dir.join(REPORT_JSON_FILE))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
}

/// The whole experiment end to end: train models, extract features, train
/// the classifier, tune, and run the comparison.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Report> {
    stage_train_models(cfg)?;
    stage_extract_features(cfg)?;
    stage_train_classifier(cfg)?;
    stage_tune(cfg)?;
    stage_run(cfg)
}
