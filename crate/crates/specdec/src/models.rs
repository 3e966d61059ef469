//! Toy character-level language models standing in for the target and draft
//! models: Laplace-smoothed n-grams with stupid backoff, and a scripted
//! table model whose behavior tests can pin down exactly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{ProbDist, TokenId};
use crate::{Error, Result};

/// Begin-of-sequence sentinel. Appears only in contexts (left padding),
/// never in a distribution's support.
pub const BOS: TokenId = TokenId(u32::MAX);

/// Character appearance of the end-of-sequence token in a serialized vocab.
const EOS_CHAR: char = '\u{0003}';

/// An ordered character vocabulary. The optional end-of-sequence token, when
/// present, occupies the last slot and is predictable like any other token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<char>,
    eos: Option<u32>,
}

impl Vocab {
    /// Vocabulary without an end-of-sequence token (generation stops only at
    /// the token budget). Symbols are deduplicated and sorted.
    pub fn from_chars(chars: &[char]) -> Self {
        let mut symbols: Vec<char> = chars.to_vec();
        symbols.sort_unstable();
        symbols.dedup();
        Self { symbols, eos: None }
    }

    /// Vocabulary with an end-of-sequence token appended after the sorted
    /// character symbols.
    pub fn with_eos(chars: &[char]) -> Self {
        let mut v = Self::from_chars(chars);
        v.symbols.push(EOS_CHAR);
        v.eos = Some(v.symbols.len() as u32 - 1);
        v
    }

    /// Vocabulary over every Unicode scalar appearing in the corpus lines,
    /// plus the end-of-sequence token.
    pub fn from_corpus<S: AsRef<str>>(lines: &[S]) -> Self {
        let chars: Vec<char> = lines.iter().flat_map(|l| l.as_ref().chars()).collect();
        Self::with_eos(&chars)
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.eos.map(TokenId)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                self.symbols
                    .iter()
                    .position(|&s| s == c)
                    .map(|i| TokenId(i as u32))
                    .ok_or(Error::UnknownSymbol(c))
            })
            .collect()
    }

    /// Renders tokens back to text; the end-of-sequence token renders empty.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter(|t| Some(t.0) != self.eos)
            .map(|t| self.symbols[t.idx()])
            .collect()
    }
}

/// One forward pass: a distribution over the vocabulary given a context.
pub trait LanguageModel {
    fn vocab(&self) -> &Vocab;
    fn next_dist(&self, context: &[TokenId]) -> ProbDist;
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab(&self) -> &Vocab {
        (**self).vocab()
    }
    fn next_dist(&self, context: &[TokenId]) -> ProbDist {
        (**self).next_dist(context)
    }
}

/// Samples the next token: `t = 0` is argmax with lowest-index tie-break,
/// `t > 0` samples from the temperature-adjusted distribution.
pub fn sample_next<M: LanguageModel + ?Sized, R: Rng>(
    model: &M,
    context: &[TokenId],
    temperature: f64,
    rng: &mut R,
) -> TokenId {
    let d = model.next_dist(context);
    if temperature == 0.0 {
        d.argmax()
    } else {
        d.apply_temperature(temperature).sample(rng)
    }
}

// ---------------------------------------------------------------------------
// N-gram model
// ---------------------------------------------------------------------------

/// Laplace-smoothed n-gram model with stupid backoff to lower orders.
///
/// Counts are kept for every context length `0..order-1`; an unseen context
/// falls back to the next shorter one, bottoming out at the always-present
/// alpha-smoothed unigram.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    alpha: f64,
    vocab: Vocab,
    // tables[l]: context of length l -> per-token counts
    tables: Vec<BTreeMap<Vec<u32>, Vec<u64>>>,
}

/// Trains an n-gram model. Sequences are left-padded with `order - 1`
/// begin-of-sequence sentinels; the end-of-sequence token is appended when
/// the vocabulary defines one.
pub fn train_ngram(corpus: &[Vec<TokenId>], order: usize, alpha: f64, vocab: Vocab) -> Result<NGramModel> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if order < 1 {
        return Err(Error::InvalidArgument("order must be >= 1".into()));
    }
    if alpha <= 0.0 {
        return Err(Error::InvalidArgument("alpha must be > 0".into()));
    }
    let v = vocab.size();
    let mut tables: Vec<BTreeMap<Vec<u32>, Vec<u64>>> = vec![BTreeMap::new(); order];
    for seq in corpus {
        let mut padded: Vec<u32> = vec![BOS.0; order - 1];
        padded.extend(seq.iter().map(|t| t.0));
        if let Some(eos) = vocab.eos() {
            padded.push(eos.0);
        }
        for pos in (order - 1)..padded.len() {
            let next = padded[pos] as usize;
            for l in 0..order {
                let ctx = padded[pos - l..pos].to_vec();
                let counts = tables[l].entry(ctx).or_insert_with(|| vec![0; v]);
                counts[next] += 1;
            }
        }
    }
    Ok(NGramModel { order, alpha, vocab, tables })
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    fn smoothed(&self, counts: &[u64]) -> ProbDist {
        let v = self.vocab.size() as f64;
        let total: u64 = counts.iter().sum();
        let denom = total as f64 + self.alpha * v;
        let probs = counts
            .iter()
            .map(|&c| (c as f64 + self.alpha) / denom)
            .collect();
        ProbDist::new(probs).expect("smoothed counts form a valid distribution")
    }
}

impl LanguageModel for NGramModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_dist(&self, context: &[TokenId]) -> ProbDist {
        let need = self.order - 1;
        let mut padded: Vec<u32> = Vec::with_capacity(need);
        if context.len() < need {
            padded.extend(std::iter::repeat_n(BOS.0, need - context.len()));
            padded.extend(context.iter().map(|t| t.0));
        } else {
            padded.extend(context[context.len() - need..].iter().map(|t| t.0));
        }
        for l in (0..self.order).rev() {
            let key = &padded[padded.len() - l..];
            if let Some(counts) = self.tables[l].get(key) {
                return self.smoothed(counts);
            }
        }
        // Empty-context unigram always exists for a non-empty corpus.
        unreachable!("unigram table missing");
    }
}

// ---------------------------------------------------------------------------
// Scripted model
// ---------------------------------------------------------------------------

/// A model defined by an explicit table from context suffixes to
/// distributions, with a fallback default. Longest stored suffix wins.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedModel {
    vocab: Vocab,
    table: BTreeMap<Vec<u32>, ProbDist>,
    default: ProbDist,
    max_key_len: usize,
}

impl ScriptedModel {
    pub fn new(vocab: Vocab, default: ProbDist) -> Result<Self> {
        if default.len() != vocab.size() {
            return Err(Error::VocabMismatch(default.len(), vocab.size()));
        }
        Ok(Self { vocab, table: BTreeMap::new(), default, max_key_len: 0 })
    }

    /// Registers a distribution for contexts ending in `suffix`.
    pub fn set(&mut self, suffix: &[TokenId], dist: ProbDist) -> Result<()> {
        if dist.len() != self.vocab.size() {
            return Err(Error::VocabMismatch(dist.len(), self.vocab.size()));
        }
        self.max_key_len = self.max_key_len.max(suffix.len());
        self.table.insert(suffix.iter().map(|t| t.0).collect(), dist);
        Ok(())
    }
}

impl LanguageModel for ScriptedModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_dist(&self, context: &[TokenId]) -> ProbDist {
        let ctx: Vec<u32> = context.iter().map(|t| t.0).collect();
        let max = self.max_key_len.min(ctx.len());
        for l in (0..=max).rev() {
            if let Some(d) = self.table.get(&ctx[ctx.len() - l..]) {
                return d.clone();
            }
        }
        self.default.clone()
    }
}

// ---------------------------------------------------------------------------
// Model pair
// ---------------------------------------------------------------------------

/// A target model and a draft model sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct ModelPair<T, D> {
    pub target: T,
    pub draft: D,
}

impl<T: LanguageModel, D: LanguageModel> ModelPair<T, D> {
    pub fn new(target: T, draft: D) -> Result<Self> {
        if target.vocab() != draft.vocab() {
            return Err(Error::VocabMismatch(target.vocab().size(), draft.vocab().size()));
        }
        Ok(Self { target, draft })
    }

    pub fn vocab(&self) -> &Vocab {
        self.target.vocab()
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NGramModelFile {
    format_version: u32,
    order: usize,
    alpha: f64,
    vocab: Vocab,
    tables: Vec<Vec<(Vec<u32>, Vec<u64>)>>,
}

impl NGramModel {
    pub fn to_json(&self) -> String {
        let file = NGramModelFile {
            format_version: MODEL_FORMAT_VERSION,
            order: self.order,
            alpha: self.alpha,
            vocab: self.vocab.clone(),
            tables: self
                .tables
                .iter()
                .map(|t| t.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
                .collect(),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NGramModelFile =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format version {}",
                file.format_version
            )));
        }
        Ok(Self {
            order: file.order,
            alpha: file.alpha,
            vocab: file.vocab,
            tables: file.tables.into_iter().map(|t| t.into_iter().collect()).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(v: &Vocab, s: &str) -> Vec<TokenId> {
        v.encode(s).unwrap()
    }

    #[test]
    fn laplace_bigram_example() {
        // corpus "aab", order 2, vocab {a,b}, alpha 1: a->a and a->b each
        // seen once, so P(.|a) = (1+1)/(2+2) each.
        let v = Vocab::from_chars(&['a', 'b']);
        let m = train_ngram(&[toks(&v, "aab")], 2, 1.0, v.clone()).unwrap();
        let d = m.next_dist(&toks(&v, "a"));
        assert_eq!(d.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn tiny_alpha_concentrates() {
        let v = Vocab::from_chars(&['a', 'b']);
        let m = train_ngram(&[toks(&v, "aa")], 2, 1e-9, v.clone()).unwrap();
        let d = m.next_dist(&toks(&v, "a"));
        assert!(d.probs()[0] > 0.999999);
        assert!(d.probs()[1] < 1e-6);
    }

    #[test]
    fn unigram_example() {
        let v = Vocab::from_chars(&['a', 'b']);
        let m = train_ngram(&[toks(&v, "ab")], 1, 1.0, v.clone()).unwrap();
        let d = m.next_dist(&toks(&v, "b"));
        assert_eq!(d.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn unseen_context_backs_off() {
        let v = Vocab::from_chars(&['a', 'b', 'c']);
        let m = train_ngram(&[toks(&v, "ab")], 3, 1.0, v.clone()).unwrap();
        // Context "cc" never seen at any stored length ending in c; backs
        // off all the way to the unigram: counts a=1, b=1, c=0, alpha=1.
        let backed = m.next_dist(&toks(&v, "cc"));
        assert_eq!(backed.probs(), &[0.4, 0.4, 0.2]);
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let v = Vocab::from_chars(&['a']);
        assert!(matches!(train_ngram(&[], 2, 1.0, v.clone()), Err(Error::EmptyCorpus)));
        assert!(train_ngram(&[vec![TokenId(0)]], 0, 1.0, v.clone()).is_err());
        assert!(train_ngram(&[vec![TokenId(0)]], 2, 0.0, v).is_err());
    }

    #[test]
    fn scripted_lookup_prefers_longest_suffix() {
        let v = Vocab::from_chars(&['x', 'y']);
        let mut m = ScriptedModel::new(v.clone(), ProbDist::uniform(2)).unwrap();
        m.set(&toks(&v, "x"), ProbDist::new(vec![0.9, 0.1]).unwrap()).unwrap();
        m.set(&toks(&v, "yx"), ProbDist::new(vec![0.2, 0.8]).unwrap()).unwrap();
        assert_eq!(m.next_dist(&toks(&v, "xx")).probs(), &[0.9, 0.1]);
        assert_eq!(m.next_dist(&toks(&v, "yx")).probs(), &[0.2, 0.8]);
        assert_eq!(m.next_dist(&toks(&v, "y")).probs(), &[0.5, 0.5]);
    }

    #[test]
    fn sample_next_semantics() {
        let v = Vocab::from_chars(&['x', 'y']);
        let mut m = ScriptedModel::new(v.clone(), ProbDist::new(vec![0.2, 0.8]).unwrap()).unwrap();
        m.set(&toks(&v, "y"), ProbDist::new(vec![0.5, 0.5]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Argmax at t=0, lowest index on ties.
        assert_eq!(sample_next(&m, &toks(&v, "x"), 0.0, &mut rng), TokenId(1));
        assert_eq!(sample_next(&m, &toks(&v, "y"), 0.0, &mut rng), TokenId(0));
        // Seeded sampling is reproducible.
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(
            sample_next(&m, &toks(&v, "y"), 1.0, &mut a),
            sample_next(&m, &toks(&v, "y"), 1.0, &mut b)
        );
    }

    #[test]
    fn greedy_sample_equals_argmax_everywhere() {
        let lines = ["the cat sat", "the dog ran", "a cat ran"];
        let v = Vocab::from_corpus(&lines);
        let corpus: Vec<_> = lines.iter().map(|l| v.encode(l).unwrap()).collect();
        let m = train_ngram(&corpus, 3, 0.5, v.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for line in &lines {
            let ctx = v.encode(line).unwrap();
            for end in 0..ctx.len() {
                let tok = sample_next(&m, &ctx[..end], 0.0, &mut rng);
                assert_eq!(tok, m.next_dist(&ctx[..end]).argmax());
            }
        }
    }

    #[test]
    fn serialization_round_trip_agrees_bitwise() {
        let lines = ["speculative decoding", "draft and target", "tokens per pass"];
        let v = Vocab::from_corpus(&lines);
        let corpus: Vec<_> = lines.iter().map(|l| v.encode(l).unwrap()).collect();
        let m = train_ngram(&corpus, 4, 0.25, v.clone()).unwrap();
        let back = NGramModel::from_json(&m.to_json()).unwrap();
        assert_eq!(m, back);
        for line in &lines {
            let ctx = v.encode(line).unwrap();
            for end in 0..=ctx.len() {
                assert_eq!(m.next_dist(&ctx[..end]).probs(), back.next_dist(&ctx[..end]).probs());
            }
        }
    }

    #[test]
    fn pair_requires_shared_vocab() {
        let v1 = Vocab::from_chars(&['a']);
        let v2 = Vocab::from_chars(&['a', 'b']);
        let m1 = ScriptedModel::new(v1, ProbDist::uniform(1)).unwrap();
        let m2 = ScriptedModel::new(v2, ProbDist::uniform(2)).unwrap();
        assert!(ModelPair::new(m1.clone(), m2).is_err());
        assert!(ModelPair::new(m1.clone(), m1).is_ok());
    }
}
