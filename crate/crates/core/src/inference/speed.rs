use std::time::Instant;

use crate::error::{Error, Result};
use crate::models::{Direction, ModelBundle};
use crate::scalar::Scalar;

/// Wall-clock comparison at batch size 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedReport {
    /// Median seconds per sentence.
    pub at_seconds: f64,
    pub nat_seconds: f64,
    /// `at_seconds / nat_seconds`.
    pub ratio: f64,
    pub sentences: usize,
}

const MIN_TOTAL: f64 = 0.1;
const RUNS: usize = 3;

fn translate_one<S: Scalar>(b: &ModelBundle<S>, d: Direction, src: &[u32], refinements: usize) -> Result<()> {
    if b.kind().is_latent() {
        b.translate_nat(d, src, refinements)?;
    } else {
        b.translate_at(d, src, src.len() * 2 + 10)?;
    }
    Ok(())
}

/// Median over three runs of the per-sentence time; the corpus is repeated
/// until one run takes at least 0.1 s.
fn time_per_sentence<S: Scalar>(
    b: &ModelBundle<S>,
    d: Direction,
    sources: &[Vec<u32>],
    refinements: usize,
) -> Result<f64> {
    let once = || -> Result<f64> {
        let t = Instant::now();
        for s in sources {
            translate_one(b, d, s, refinements)?;
        }
        Ok(t.elapsed().as_secs_f64())
    };
    let first = once()?;
    let repeats = if first >= MIN_TOTAL {
        1
    } else {
        (MIN_TOTAL / first.max(1e-9)).ceil() as usize + 1
    };
    let mut runs = Vec::with_capacity(RUNS);
    for _ in 0..RUNS {
        let mut total = 0.0;
        for _ in 0..repeats {
            total += once()?;
        }
        runs.push(total / (repeats * sources.len()) as f64);
    }
    runs.sort_by(f64::total_cmp);
    Ok(runs[RUNS / 2])
}

/// Speed of `nat` relative to `at` over the same sentences, one at a time.
/// Either bundle may be of any kind; the decoding procedure follows it.
pub fn speed_bench<S: Scalar>(
    nat: &ModelBundle<S>,
    at: &ModelBundle<S>,
    d: Direction,
    sources: &[Vec<u32>],
    refinements: usize,
) -> Result<SpeedReport> {
    if sources.is_empty() {
        return Err(Error::Empty("benchmark corpus"));
    }
    let at_seconds = time_per_sentence(at, d, sources, refinements)?;
    let nat_seconds = time_per_sentence(nat, d, sources, refinements)?;
    Ok(SpeedReport {
        at_seconds,
        nat_seconds,
        ratio: at_seconds / nat_seconds,
        sentences: sources.len(),
    })
}
