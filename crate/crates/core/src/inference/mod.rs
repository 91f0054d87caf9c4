//! Translation with the latent models (parallel decoding plus iterative
//! refinement) and the autoregressive reference, BLEU, and the speed
//! benchmark.

mod bleu;
mod speed;

pub use bleu::{bleu, sentence_bleu};
pub use speed::{speed_bench, SpeedReport};

use std::time::Instant;

use crate::data::{EOS, PAD};
use crate::error::{Error, Result};
use crate::latent::{fuse_shared_vars, select_vars, GaussianVars};
use crate::models::{length_from_class, Direction, ModelBundle, ModelKind};
use crate::nn::SeqBatch;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Mode, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TranslationResult {
    pub tokens: Vec<u32>,
    pub refinements_used: usize,
    pub latency_seconds: f64,
    pub decoder_passes: usize,
    pub length_predictions: usize,
    /// Set when the bundle has never been trained.
    pub untrained: bool,
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy token choice per position; rows are truncated to `lens`.
fn decode_tokens<S: Scalar>(g: &Graph<'_, S>, logits: Var, lens: &[usize]) -> Vec<Vec<u32>> {
    let shape = g.shape(logits);
    let (l_max, v) = (shape[1], shape[2]);
    let data = g.value(logits).data();
    lens.iter()
        .enumerate()
        .map(|(b, &l)| {
            (0..l)
                .map(|t| argmax(&data[(b * l_max + t) * v..(b * l_max + t + 1) * v]) as u32)
                .collect()
        })
        .collect()
}

struct NatState {
    h: Var,
    lens: Vec<usize>,
    own: GaussianVars,
}

impl<S: Scalar> ModelBundle<S> {
    fn predicted_lengths(&self, g: &mut Graph<'_, S>, d: Direction, z: Var, st: &NatState) -> Result<Vec<usize>> {
        let logits = self.dir(d).predict_length(g, z, st.h, &st.lens)?;
        let classes = crate::models::LENGTH_CLASSES;
        let data = g.value(logits).data();
        let max = self.config.block.max_positions;
        Ok(st
            .lens
            .iter()
            .enumerate()
            .map(|(b, &t)| length_from_class(t, argmax(&data[b * classes..(b + 1) * classes]), max))
            .collect())
    }

    fn nat_decode(&self, g: &mut Graph<'_, S>, d: Direction, z: Var, st: &NatState) -> Result<Vec<Vec<u32>>> {
        let lens = self.predicted_lengths(g, d, z, st)?;
        let logits = self
            .dir(d)
            .decode_latent(g, &self.positions, z, st.h, &st.lens, &lens)?;
        Ok(decode_tokens(g, logits, &lens))
    }

    /// Posterior mean given the source and the current hypotheses.
    fn refine_latent(
        &self,
        g: &mut Graph<'_, S>,
        d: Direction,
        x: &SeqBatch,
        hyp: &SeqBatch,
        st: &NatState,
    ) -> Result<Var> {
        match self.kind() {
            ModelKind::LaNmt => Ok(self.posterior_lanmt(g, d, x, hyp)?.mean),
            ModelKind::LadderNmt => {
                let (_, other) = self.prior(g, d.flip(), hyp)?;
                let (q_x, q_y) = match d {
                    Direction::Forward => (st.own, other),
                    Direction::Reverse => (other, st.own),
                };
                let fused = fuse_shared_vars(g, q_x, q_y)?;
                Ok(select_vars(g, fused, other, &self.mask)?.mean)
            }
            ModelKind::At => Err(Error::invalid("refinement needs a latent model")),
        }
    }

    /// Parallel decoding from the prior mean followed by `refinements`
    /// rounds of posterior re-estimation. Only the sources are read.
    pub fn translate_nat_batch(
        &self,
        d: Direction,
        sources: &[&[u32]],
        refinements: usize,
    ) -> Result<Vec<TranslationResult>> {
        if !self.kind().is_latent() {
            return Err(Error::invalid("translate_nat needs a latent model"));
        }
        let start = Instant::now();
        let x = SeqBatch::new(sources, PAD)?;
        let mut g = Graph::with_params(&self.store, Mode::Eval);
        let (h, own) = self.prior(&mut g, d, &x)?;
        let st = NatState {
            h,
            lens: x.lens.clone(),
            own,
        };
        let mut hyp = self.nat_decode(&mut g, d, own.mean, &st)?;
        for _ in 0..refinements {
            let yb = SeqBatch::new(&hyp, PAD)?;
            let z = self.refine_latent(&mut g, d, &x, &yb, &st)?;
            hyp = self.nat_decode(&mut g, d, z, &st)?;
        }
        let passes = g.counters.decoder_passes;
        let lengths = g.counters.length_predictions;
        let latency = start.elapsed().as_secs_f64() / sources.len() as f64;
        Ok(hyp
            .into_iter()
            .map(|tokens| TranslationResult {
                tokens,
                refinements_used: refinements,
                latency_seconds: latency,
                decoder_passes: passes,
                length_predictions: lengths,
                untrained: self.trained_steps == 0,
            })
            .collect())
    }

    pub fn translate_nat(&self, d: Direction, source: &[u32], refinements: usize) -> Result<TranslationResult> {
        Ok(self.translate_nat_batch(d, &[source], refinements)?.remove(0))
    }

    /// One refinement round on fixed hypotheses; the source is untouched.
    pub fn refine(&self, d: Direction, source: &[u32], hyp: &[u32]) -> Result<Vec<u32>> {
        let x = SeqBatch::new(&[source], PAD)?;
        let yb = SeqBatch::new(&[hyp], PAD)?;
        let mut g = Graph::with_params(&self.store, Mode::Eval);
        let (h, own) = self.prior(&mut g, d, &x)?;
        let st = NatState {
            h,
            lens: x.lens.clone(),
            own,
        };
        let z = self.refine_latent(&mut g, d, &x, &yb, &st)?;
        Ok(self.nat_decode(&mut g, d, z, &st)?.remove(0))
    }

    /// Greedy autoregressive decoding. Each row stops at `EOS` (which is
    /// kept) or after `max_len` tokens; one decoder pass per emitted token.
    pub fn translate_at_batch(&self, d: Direction, sources: &[&[u32]], max_len: usize) -> Result<Vec<TranslationResult>> {
        if self.kind() != ModelKind::At {
            return Err(Error::invalid("translate_at needs an autoregressive model"));
        }
        let max_len = max_len.min(self.config.block.max_positions - 1).max(1);
        let start = Instant::now();
        let x = SeqBatch::new(sources, PAD)?;
        let mut g = Graph::with_params(&self.store, Mode::Eval);
        let m = self.dir(d);
        let h = m.encode(&mut g, &self.positions, &x)?;
        let n = sources.len();
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        let mut prefix: Vec<Vec<u32>> = vec![vec![EOS]; n];
        for _ in 0..max_len {
            let pb = SeqBatch::new(&prefix, PAD)?;
            let logits = m.decode_prefix(&mut g, &self.positions, &pb, h, &x.lens)?;
            let (p, v) = (pb.max_len, self.config.vocab);
            let data = g.value(logits).data();
            for b in 0..n {
                if done[b] {
                    // keeps every prefix the same length
                    prefix[b].push(PAD);
                    continue;
                }
                let row = &data[(b * p + p - 1) * v..(b * p + p) * v];
                let tok = argmax(row) as u32;
                out[b].push(tok);
                prefix[b].push(tok);
                done[b] = tok == EOS;
            }
            if done.iter().all(|&x| x) {
                break;
            }
        }
        let latency = start.elapsed().as_secs_f64() / n as f64;
        Ok(out
            .into_iter()
            .map(|tokens| TranslationResult {
                decoder_passes: tokens.len(),
                length_predictions: 0,
                tokens,
                refinements_used: 0,
                latency_seconds: latency,
                untrained: self.trained_steps == 0,
            })
            .collect())
    }

    pub fn translate_at(&self, d: Direction, source: &[u32], max_len: usize) -> Result<TranslationResult> {
        Ok(self.translate_at_batch(d, &[source], max_len)?.remove(0))
    }

    /// Translates `sources` in chunks of `batch`, across `threads` workers.
    /// AT output loses its trailing `EOS`.
    pub fn translate_all(
        &self,
        d: Direction,
        sources: &[Vec<u32>],
        refinements: usize,
        batch: usize,
        threads: usize,
    ) -> Result<Vec<Vec<u32>>> {
        // Length-sorted chunks waste less work on padding; rows decode
        // independently, so the order does not change any output.
        let mut order: Vec<usize> = (0..sources.len()).collect();
        order.sort_by_key(|&i| sources[i].len());
        let chunks: Vec<&[usize]> = order.chunks(batch.max(1)).collect();
        let run = |chunk: &[usize]| -> Result<Vec<Vec<u32>>> {
            let refs: Vec<&[u32]> = chunk.iter().map(|&i| sources[i].as_slice()).collect();
            let res = if self.kind() == ModelKind::At {
                let max_len = refs.iter().map(|r| r.len()).max().unwrap_or(1) * 2 + 10;
                self.translate_at_batch(d, &refs, max_len)?
            } else {
                self.translate_nat_batch(d, &refs, refinements)?
            };
            Ok(res.into_iter().map(|r| strip_eos(r.tokens)).collect())
        };
        let threads = threads.max(1).min(chunks.len().max(1));
        let results: Vec<Result<Vec<Vec<u32>>>> = if threads == 1 {
            chunks.iter().map(|c| run(c)).collect()
        } else {
            let per = chunks.len().div_ceil(threads);
            std::thread::scope(|s| {
                let handles: Vec<_> = chunks
                    .chunks(per)
                    .map(|group| s.spawn(move || group.iter().map(|c| run(c)).collect::<Vec<_>>()))
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("translation worker panicked"))
                    .collect()
            })
        };
        let mut out = vec![Vec::new(); sources.len()];
        for (chunk, r) in chunks.iter().zip(results) {
            for (&i, tokens) in chunk.iter().zip(r?) {
                out[i] = tokens;
            }
        }
        Ok(out)
    }
}

/// Drops everything from the first `EOS` on.
pub fn strip_eos(mut tokens: Vec<u32>) -> Vec<u32> {
    if let Some(p) = tokens.iter().position(|&t| t == EOS) {
        tokens.truncate(p);
    }
    tokens
}

#[cfg(test)]
mod tests;
