use std::collections::HashMap;

use crate::error::{Error, Result};

const MAX_N: usize = 4;

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and hypothesis n-gram totals for n = 1..=4.
fn stats(hyp: &[u32], reference: &[u32]) -> [(usize, usize); MAX_N] {
    let mut out = [(0, 0); MAX_N];
    for (i, slot) in out.iter_mut().enumerate() {
        let n = i + 1;
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        let matched = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        *slot = (matched, hyp.len().saturating_sub(n - 1));
    }
    out
}

fn combine(matches: [(usize, usize); MAX_N], hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 || matches.iter().any(|&(m, t)| m == 0 || t == 0) {
        return 0.0;
    }
    let log_p: f64 = matches
        .iter()
        .map(|&(m, t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * log_p.exp()
}

/// Corpus-level BLEU-4 with brevity penalty and uniform weights, unsmoothed.
pub fn bleu<H: AsRef<[u32]>, R: AsRef<[u32]>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Empty("BLEU corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut total = [(0, 0); MAX_N];
    let (mut hl, mut rl) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        for (acc, s) in total.iter_mut().zip(stats(h, r)) {
            acc.0 += s.0;
            acc.1 += s.1;
        }
        hl += h.len();
        rl += r.len();
    }
    Ok(combine(total, hl, rl))
}

/// BLEU of a single sentence pair (no smoothing, so short or poor
/// hypotheses score 0).
pub fn sentence_bleu(hyp: &[u32], reference: &[u32]) -> f64 {
    combine(stats(hyp, reference), hyp.len(), reference.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        let r = vec![vec![3u32, 4, 5, 6, 7], vec![8, 9, 10, 11]];
        assert_eq!(bleu(&r, &r).unwrap(), 1.0);
        let disjoint = vec![vec![20u32, 21, 22, 23, 24], vec![25, 26, 27, 28]];
        assert_eq!(bleu(&disjoint, &r).unwrap(), 0.0);
        let b = bleu(&[vec![3u32, 4, 5, 6]], &[vec![3u32, 4, 5, 6, 7]]).unwrap();
        assert!((b - (-0.25f64).exp()).abs() < 1e-12);
        assert!((b - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn errors() {
        assert!(bleu::<Vec<u32>, Vec<u32>>(&[], &[]).is_err());
        assert!(bleu(&[vec![3u32]], &[vec![3u32], vec![4]]).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            pairs in proptest::collection::vec(
                (proptest::collection::vec(3u32..8, 1..10), proptest::collection::vec(3u32..8, 1..10)),
                1..12,
            ),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (h1, r1): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let (h2, r2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            let (a, b) = (bleu(&h1, &r1).unwrap(), bleu(&h2, &r2).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
