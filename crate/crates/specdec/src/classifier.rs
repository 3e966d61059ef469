//! The halting classifier: teacher-forced feature extraction from a model
//! pair, a from-scratch 2-layer feed-forward network trained with
//! mini-batch gradient descent against the argmax-agreement labels (or,
//! via config, the total-variation soft labels), and F1 evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{tv_distance, FeatureVector, TokenId};
use crate::engine::{autoregressive_generate, GenerationConfig};
use crate::models::{LanguageModel, ModelPair};
use crate::{Error, Result};

/// One training example: features for a drafted token plus both label
/// flavors — the binary argmax-agreement label and the `1 − TV` soft label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFeature {
    pub features: FeatureVector,
    pub accept_label: bool,
    pub soft_label: f64,
}

/// Which label the loss is computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// `1 − TV(draft, target)` soft target.
    Soft,
    /// Binary argmax-agreement target.
    Hard,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub label_mode: LabelMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 64,
            seed: 0,
            hidden_dim: 32,
            label_mode: LabelMode::Hard,
        }
    }
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// 2-layer network: `sigmoid(w2 · relu(w1·x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnParams {
    /// hidden × input.
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl FfnParams {
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let s1 = 1.0 / (input_dim as f64).sqrt();
        let s2 = 1.0 / (hidden_dim as f64).sqrt();
        Self {
            w1: (0..hidden_dim)
                .map(|_| (0..input_dim).map(|_| rng.gen_range(-s1..s1)).collect())
                .collect(),
            b1: vec![0.0; hidden_dim],
            w2: (0..hidden_dim).map(|_| rng.gen_range(-s2..s2)).collect(),
            b2: 0.0,
        }
    }

    /// All-zero weights with only the output bias set; the forward pass is
    /// then `sigmoid(b2)` for every input.
    pub fn bias_only(input_dim: usize, hidden_dim: usize, b2: f64) -> Self {
        Self {
            w1: vec![vec![0.0; input_dim]; hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim],
            b2,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.first().map_or(0, Vec::len)
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.len()
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        self.w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| {
                let z: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b;
                z.max(0.0)
            })
            .collect()
    }

    /// Confidence score in (0, 1).
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let h = self.hidden(x);
        let z: f64 = self.w2.iter().zip(&h).map(|(w, hi)| w * hi).sum::<f64>() + self.b2;
        Ok(sigmoid(z))
    }

    pub fn forward_features(&self, fv: &FeatureVector) -> Result<f64> {
        self.forward(&fv.as_input())
    }

    /// Mean binary cross-entropy loss and parameter gradients for a batch.
    pub fn loss_and_grads(&self, batch: &[(&[f64], f64)]) -> (f64, FfnGrads) {
        let mut grads = FfnGrads::zeros(self.input_dim(), self.hidden_dim());
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for (x, y) in batch {
            let h = self.hidden(x);
            let z: f64 = self.w2.iter().zip(&h).map(|(w, hi)| w * hi).sum::<f64>() + self.b2;
            let c = sigmoid(z);
            let eps = 1e-12;
            loss += -(y * (c + eps).ln() + (1.0 - y) * (1.0 - c + eps).ln()) * scale;
            // dL/dz for sigmoid + BCE is (c − y).
            let dz = (c - y) * scale;
            grads.b2 += dz;
            for (j, &hj) in h.iter().enumerate() {
                grads.w2[j] += dz * hj;
                if hj > 0.0 {
                    let dh = dz * self.w2[j];
                    grads.b1[j] += dh;
                    for (g, xi) in grads.w1[j].iter_mut().zip(*x) {
                        *g += dh * xi;
                    }
                }
            }
        }
        (loss, grads)
    }

    fn apply(&mut self, grads: &FfnGrads, lr: f64) {
        for (row, grow) in self.w1.iter_mut().zip(&grads.w1) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= lr * g;
            }
        }
        for (b, g) in self.b1.iter_mut().zip(&grads.b1) {
            *b -= lr * g;
        }
        for (w, g) in self.w2.iter_mut().zip(&grads.w2) {
            *w -= lr * g;
        }
        self.b2 -= lr * grads.b2;
    }
}

/// Gradients shaped like [`FfnParams`].
#[derive(Debug, Clone)]
pub struct FfnGrads {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl FfnGrads {
    fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w1: vec![vec![0.0; input_dim]; hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim],
            b2: 0.0,
        }
    }
}

/// Forward pass on a feature vector, checking the `k + 2` input dimension.
pub fn ffn_forward(params: &FfnParams, fv: &FeatureVector) -> Result<f64> {
    params.forward_features(fv)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Mini-batch gradient descent against the configured label, seeded and
/// deterministic. Errors when the loss goes non-finite.
pub fn train(data: &[LabeledFeature], cfg: &TrainConfig) -> Result<FfnParams> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let inputs: Vec<Vec<f64>> = data.iter().map(|d| d.features.as_input()).collect();
    let targets: Vec<f64> = data
        .iter()
        .map(|d| match cfg.label_mode {
            LabelMode::Soft => d.soft_label,
            LabelMode::Hard => {
                if d.accept_label {
                    1.0
                } else {
                    0.0
                }
            }
        })
        .collect();
    let input_dim = inputs[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = FfnParams::init(input_dim, cfg.hidden_dim, &mut rng);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], f64)> =
                chunk.iter().map(|&i| (inputs[i].as_slice(), targets[i])).collect();
            let (loss, grads) = params.loss_and_grads(&batch);
            if !loss.is_finite() {
                return Err(Error::DivergentTraining(epoch));
            }
            params.apply(&grads, cfg.learning_rate);
        }
    }
    Ok(params)
}

/// Mean loss of `params` on a dataset, for monitoring.
pub fn mean_loss(params: &FfnParams, data: &[LabeledFeature], mode: LabelMode) -> f64 {
    let inputs: Vec<Vec<f64>> = data.iter().map(|d| d.features.as_input()).collect();
    let batch: Vec<(&[f64], f64)> = inputs
        .iter()
        .zip(data)
        .map(|(x, d)| {
            let y = match mode {
                LabelMode::Soft => d.soft_label,
                LabelMode::Hard => d.accept_label as u8 as f64,
            };
            (x.as_slice(), y)
        })
        .collect();
    params.loss_and_grads(&batch).0
}

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

/// Extraction knobs: feature width, generation budget, and how the position
/// feature is scaled.
#[derive(Debug, Clone)]
pub struct ExtractConfig {
    pub k: usize,
    pub max_new_tokens: usize,
    /// Divisor applied to the raw position before it enters the feature
    /// vector; `None` feeds the raw position.
    pub position_normalize_by: Option<f64>,
}

/// Teacher-forced feature extraction: the target generates the reference
/// continuation greedily; at every position the draft's one-step
/// distribution (conditioned on the target's own prefix) yields the
/// features, the argmax-agreement label, and the `1 − TV` soft label. One
/// record per reference token; position counts from the start of
/// generation (1-based).
pub fn extract_features<T, D>(
    pair: &ModelPair<T, D>,
    prompts: &[Vec<TokenId>],
    cfg: &ExtractConfig,
) -> Result<Vec<LabeledFeature>>
where
    T: LanguageModel,
    D: LanguageModel,
{
    if prompts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let gen_cfg = GenerationConfig::greedy(cfg.max_new_tokens, 1);
    let mut out = Vec::new();
    for prompt in prompts {
        let reference = autoregressive_generate(&pair.target, prompt, &gen_cfg)?;
        let mut ctx = prompt.clone();
        for (i, &target_tok) in reference.output.iter().enumerate() {
            let draft_dist = pair.draft.next_dist(&ctx);
            let target_dist = pair.target.next_dist(&ctx);
            let raw_pos = (i + 1) as f64;
            let position = match cfg.position_normalize_by {
                Some(s) => raw_pos / s,
                None => raw_pos,
            };
            out.push(LabeledFeature {
                features: FeatureVector::from_dist(&draft_dist, cfg.k, position),
                accept_label: draft_dist.argmax() == target_dist.argmax(),
                soft_label: 1.0 - tv_distance(&draft_dist, &target_dist)?,
            });
            ctx.push(target_tok);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// F1
// ---------------------------------------------------------------------------

/// Precision, recall, and F1 with "accept/continue" as the positive class.
/// With no positive predictions and no positive labels all three are 1 by
/// convention; with positive labels but none predicted they are 0.
pub fn f1_eval(preds: &[bool], labels: &[bool]) -> Result<(f64, f64, f64)> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fne = 0u64;
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    if tp + fp == 0 && tp + fne == 0 {
        return Ok((1.0, 1.0, 1.0));
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fne == 0 { 0.0 } else { tp as f64 / (tp + fne) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1))
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

const FFN_FORMAT: &str = "specdec-ffn-v1";

impl FfnParams {
    /// Versioned flat text: dimensions, then parameters row-major in
    /// shortest round-trip decimal form.
    pub fn to_text(&self) -> String {
        let mut s = format!("{FFN_FORMAT}\n{} {}\n", self.input_dim(), self.hidden_dim());
        for row in &self.w1 {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        let b1: Vec<String> = self.b1.iter().map(f64::to_string).collect();
        s.push_str(&b1.join(" "));
        s.push('\n');
        let w2: Vec<String> = self.w2.iter().map(f64::to_string).collect();
        s.push_str(&w2.join(" "));
        s.push('\n');
        s.push_str(&self.b2.to_string());
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty classifier file".into()))?;
        if header != FFN_FORMAT {
            return Err(Error::Format(format!("unknown classifier format {header:?}")));
        }
        let dims: Vec<usize> = lines
            .next()
            .ok_or_else(|| Error::Format("missing dimensions".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Format("bad dimension".into())))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(Error::Format("expected two dimensions".into()));
        }
        let (input_dim, hidden_dim) = (dims[0], dims[1]);
        let parse_row = |line: &str| -> Result<Vec<f64>> {
            line.split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Format(format!("bad number {t:?}"))))
                .collect()
        };
        let mut w1 = Vec::with_capacity(hidden_dim);
        for _ in 0..hidden_dim {
            let row = parse_row(lines.next().ok_or_else(|| Error::Format("truncated w1".into()))?)?;
            if row.len() != input_dim {
                return Err(Error::Format("w1 row length mismatch".into()));
            }
            w1.push(row);
        }
        let b1 = parse_row(lines.next().ok_or_else(|| Error::Format("missing b1".into()))?)?;
        let w2 = parse_row(lines.next().ok_or_else(|| Error::Format("missing w2".into()))?)?;
        let b2_line = lines.next().ok_or_else(|| Error::Format("missing b2".into()))?;
        let b2 = b2_line.trim().parse().map_err(|_| Error::Format("bad b2".into()))?;
        if b1.len() != hidden_dim || w2.len() != hidden_dim {
            return Err(Error::Format("bias/output length mismatch".into()));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Line-delimited feature records with a header line.
pub fn features_to_jsonl(data: &[LabeledFeature]) -> String {
    let mut s = String::from("{\"format_version\":1,\"kind\":\"features\"}\n");
    for d in data {
        s.push_str(&serde_json::to_string(d).expect("feature serializes"));
        s.push('\n');
    }
    s
}

pub fn features_from_jsonl(text: &str) -> Result<Vec<LabeledFeature>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty feature file".into()))?;
    let h: serde_json::Value =
        serde_json::from_str(header).map_err(|e| Error::Format(e.to_string()))?;
    if h["format_version"] != 1 {
        return Err(Error::Format("unsupported feature format version".into()));
    }
    lines
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}
