//! Synthetic parallel corpora, batching and knowledge distillation.
//!
//! A corpus is a token relabelling task: a seeded base lexicon maps source
//! tokens to target tokens, and each synonym register shifts that lexicon by
//! its own offset. With one register every source sentence has exactly one
//! translation; with `R` registers it has exactly `R`.

mod io;
mod kd;

pub use io::{load_corpus, save_corpus};
pub use kd::{kd_regenerate, target_diversity};

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::SeqBatch;

/// Padding id.
pub const PAD: u32 = 0;
/// End of sentence; also the autoregressive start token.
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
/// First id available to content tokens.
pub const FIRST_CONTENT: u32 = 3;

/// How a target sentence's length follows from its source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LengthRule {
    /// Target length equals source length.
    Identity,
    /// Every `k`-th target token is emitted twice.
    DuplicateEvery(usize),
}

impl LengthRule {
    pub fn target_len(self, source_len: usize) -> usize {
        match self {
            LengthRule::Identity => source_len,
            LengthRule::DuplicateEvery(k) => source_len + source_len / k,
        }
    }

    fn apply(self, mapped: Vec<u32>) -> Vec<u32> {
        match self {
            LengthRule::Identity => mapped,
            LengthRule::DuplicateEvery(k) => mapped
                .iter()
                .enumerate()
                .flat_map(|(i, &t)| {
                    let n = if (i + 1) % k == 0 { 2 } else { 1 };
                    std::iter::repeat(t).take(n)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Vocabulary sizes include the reserved ids.
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub registers: usize,
    pub length_rule: LengthRule,
    /// Distinct source sentences the pairs are drawn from; defaults to `pairs`.
    pub source_pool: Option<usize>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            source_vocab: 64,
            target_vocab: 64,
            pairs: 10_000,
            min_len: 4,
            max_len: 16,
            registers: 1,
            length_rule: LengthRule::Identity,
            source_pool: None,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self, max_positions: usize) -> Result<()> {
        if self.source_vocab < 8 || self.target_vocab < 8 {
            return Err(Error::invalid("vocabulary sizes must be at least 8"));
        }
        if self.target_vocab < self.source_vocab {
            return Err(Error::invalid(format!(
                "target vocab {} cannot hold an injective lexicon from source vocab {}",
                self.target_vocab, self.source_vocab
            )));
        }
        if let LengthRule::DuplicateEvery(0) = self.length_rule {
            return Err(Error::invalid("duplication period must be positive"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid(format!("length range [{}, {}]", self.min_len, self.max_len)));
        }
        if self.length_rule.target_len(self.max_len) > max_positions {
            return Err(Error::invalid(format!(
                "target length {} exceeds max positions {max_positions}",
                self.length_rule.target_len(self.max_len)
            )));
        }
        if self.registers == 0 {
            return Err(Error::invalid("registers must be at least 1"));
        }
        let content = self.target_vocab - FIRST_CONTENT as usize;
        if self.registers > content {
            return Err(Error::invalid(format!(
                "{} registers need at least that many target content tokens, have {content}",
                self.registers
            )));
        }
        if self.pairs == 0 || self.source_pool == Some(0) {
            return Err(Error::Empty("corpus"));
        }
        Ok(())
    }

    /// Joint vocabulary size used by the models.
    pub fn joint_vocab(&self) -> usize {
        self.source_vocab.max(self.target_vocab)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub register: usize,
}

/// Per-register token maps derived from a spec.
#[derive(Clone, Debug)]
pub struct Lexicon {
    /// `maps[r][s]` is the target of source token `s` under register `r`.
    pub maps: Vec<Vec<u32>>,
}

impl Lexicon {
    pub fn new(spec: &CorpusSpec, rng: &mut impl Rng) -> Self {
        let first = FIRST_CONTENT as usize;
        let mut targets: Vec<u32> = (FIRST_CONTENT..spec.target_vocab as u32).collect();
        targets.shuffle(rng);
        let content = targets.len();
        let mut offsets: Vec<usize> = (1..content).collect();
        offsets.shuffle(rng);
        offsets.insert(0, 0);
        let maps = offsets[..spec.registers]
            .iter()
            .map(|&off| {
                let mut m: Vec<u32> = (0..first as u32).collect();
                m.extend((0..spec.source_vocab - first).map(|i| targets[(i + off) % content]));
                m
            })
            .collect();
        Lexicon { maps }
    }

    pub fn translate(&self, register: usize, source: &[u32], rule: LengthRule) -> Vec<u32> {
        rule.apply(source.iter().map(|&s| self.maps[register][s as usize]).collect())
    }
}

pub fn gen_corpus(spec: &CorpusSpec, max_positions: usize) -> Result<Vec<ParallelPair>> {
    spec.validate(max_positions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lexicon = Lexicon::new(spec, &mut rng);
    let pool_size = spec.source_pool.unwrap_or(spec.pairs);
    let pool: Vec<Vec<u32>> = (0..pool_size)
        .map(|_| {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            (0..len)
                .map(|_| rng.gen_range(FIRST_CONTENT..spec.source_vocab as u32))
                .collect()
        })
        .collect();
    Ok((0..spec.pairs)
        .map(|_| {
            let source = pool[rng.gen_range(0..pool_size)].clone();
            let register = rng.gen_range(0..spec.registers);
            let target = lexicon.translate(register, &source, spec.length_rule);
            ParallelPair {
                source,
                target,
                register,
            }
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<ParallelPair>,
    pub valid: Vec<ParallelPair>,
    pub test: Vec<ParallelPair>,
}

/// Splits by distinct source sentence so no source appears in two splits.
pub fn split_corpus(pairs: &[ParallelPair], valid: f64, test: f64, seed: u64) -> Result<Splits> {
    if !(valid >= 0.0 && test >= 0.0 && valid + test < 1.0) {
        return Err(Error::invalid(format!("split fractions {valid}, {test}")));
    }
    let mut groups: BTreeMap<&[u32], Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        groups.entry(&p.source).or_default().push(i);
    }
    let mut keys: Vec<&[u32]> = groups.keys().copied().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = keys.len();
    let n_valid = (n as f64 * valid).round() as usize;
    let n_test = (n as f64 * test).round() as usize;
    let part = |range: std::ops::Range<usize>| -> Vec<ParallelPair> {
        let mut idx: Vec<usize> = keys[range].iter().flat_map(|k| groups[k].iter().copied()).collect();
        idx.sort_unstable();
        idx.into_iter().map(|i| pairs[i].clone()).collect()
    };
    let valid = part(0..n_valid);
    let test = part(n_valid..n_valid + n_test);
    let train = part(n_valid + n_test..n);
    Ok(Splits { train, valid, test })
}

/// A padded source/target batch and the corpus rows it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: SeqBatch,
    pub tgt: SeqBatch,
    pub indices: Vec<usize>,
}

/// Shuffles under `seed`, groups sentences of similar length to limit
/// padding, and returns batches in shuffled order.
pub fn batch(pairs: &[ParallelPair], batch_size: usize, pad: u32, seed: u64) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for window in order.chunks(batch_size * 32) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| (pairs[i].source.len(), pairs[i].target.len()));
        for chunk in w.chunks(batch_size) {
            batches.push(make_batch(pairs, chunk, pad)?);
        }
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

pub fn make_batch(pairs: &[ParallelPair], indices: &[usize], pad: u32) -> Result<Batch> {
    let src: Vec<&[u32]> = indices.iter().map(|&i| pairs[i].source.as_slice()).collect();
    let tgt: Vec<&[u32]> = indices.iter().map(|&i| pairs[i].target.as_slice()).collect();
    Ok(Batch {
        src: SeqBatch::new(&src, pad)?,
        tgt: SeqBatch::new(&tgt, pad)?,
        indices: indices.to_vec(),
    })
}

/// Swaps source and target of every pair.
pub fn reversed(pairs: &[ParallelPair]) -> Vec<ParallelPair> {
    pairs
        .iter()
        .map(|p| ParallelPair {
            source: p.target.clone(),
            target: p.source.clone(),
            register: p.register,
        })
        .collect()
}

/// Number of distinct sources that occur more than once.
pub fn duplicated_sources(pairs: &[ParallelPair]) -> usize {
    let mut seen = HashSet::new();
    let mut dup = HashSet::new();
    for p in pairs {
        if !seen.insert(&p.source) {
            dup.insert(&p.source);
        }
    }
    dup.len()
}
