use std::collections::{BTreeMap, BTreeSet};

use super::{ParallelPair, EOS};
use crate::error::{Error, Result};
use crate::models::{Direction, ModelBundle, ModelKind};
use crate::scalar::Scalar;

/// Bidirectional sequence-level distillation. Returns
/// `(source, AT-forward(source))` and `(AT-reverse(target), target)` pairs,
/// one per input pair. `at` holds both directions.
pub fn kd_regenerate<S: Scalar>(
    pairs: &[ParallelPair],
    at: &ModelBundle<S>,
    batch: usize,
    threads: usize,
) -> Result<(Vec<ParallelPair>, Vec<ParallelPair>)> {
    if at.kind() != ModelKind::At {
        return Err(Error::invalid("distillation needs an autoregressive teacher"));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let sources: Vec<Vec<u32>> = pairs.iter().map(|p| p.source.clone()).collect();
    let targets: Vec<Vec<u32>> = pairs.iter().map(|p| p.target.clone()).collect();
    let fwd = at.translate_all(Direction::Forward, &sources, 0, batch, threads)?;
    let rev = at.translate_all(Direction::Reverse, &targets, 0, batch, threads)?;
    let mut empty = 0;
    let mut fix = |mut t: Vec<u32>| {
        if t.is_empty() {
            empty += 1;
            t.push(EOS);
        }
        t
    };
    let src2tgt = pairs
        .iter()
        .zip(fwd)
        .map(|(p, t)| ParallelPair {
            source: p.source.clone(),
            target: fix(t),
            register: p.register,
        })
        .collect();
    let tgt2src = pairs
        .iter()
        .zip(rev)
        .map(|(p, s)| ParallelPair {
            source: fix(s),
            target: p.target.clone(),
            register: p.register,
        })
        .collect();
    if empty > 0 {
        log::warn!("teacher produced {empty} empty translations, replaced by a lone end token");
    }
    Ok((src2tgt, tgt2src))
}

/// Mean number of distinct targets per source sentence, over the sources
/// that occur more than once. `None` when no source repeats.
pub fn target_diversity(pairs: &[ParallelPair]) -> Option<f64> {
    let mut by_source: BTreeMap<&[u32], (usize, BTreeSet<&[u32]>)> = BTreeMap::new();
    for p in pairs {
        let e = by_source.entry(&p.source).or_default();
        e.0 += 1;
        e.1.insert(&p.target);
    }
    let dup: Vec<usize> = by_source
        .values()
        .filter(|(n, _)| *n > 1)
        .map(|(_, t)| t.len())
        .collect();
    if dup.is_empty() {
        None
    } else {
        Some(dup.iter().sum::<usize>() as f64 / dup.len() as f64)
    }
}
