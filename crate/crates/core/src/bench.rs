//! Wall-clock latency of frozen batched inference.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::EdgeEvent;
use crate::metrics::mean_std;
use crate::trainer::Scorer;

/// Anything that consumes a batch of events and scores it.
pub trait BatchScorer {
    /// Clears any per-run state before an iteration.
    fn reset(&mut self);
    /// Returns the number of events scored.
    fn score_batch(&mut self, batch: &[EdgeEvent]) -> Result<usize>;
}

impl BatchScorer for Scorer<'_> {
    fn reset(&mut self) {
        Scorer::reset(self);
    }

    fn score_batch(&mut self, batch: &[EdgeEvent]) -> Result<usize> {
        self.infer_batch(batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batches: usize,
    pub batch_size: usize,
    pub iterations: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { batches: 200, batch_size: 200, iterations: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub dataset: String,
    pub model: String,
    pub batches: usize,
    pub batch_size: usize,
    pub iterations: usize,
    /// Per-batch seconds, averaged over the timed iterations.
    pub batch_seconds: Vec<f64>,
    /// Total seconds of each timed iteration.
    pub iteration_seconds: Vec<f64>,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub mean_batch_seconds: f64,
    pub events_per_second: f64,
    pub events_scored: usize,
}

impl LatencyReport {
    /// `batch,seconds` rows.
    pub fn batch_csv(&self) -> String {
        let mut out = String::from("batch,seconds\n");
        for (i, t) in self.batch_seconds.iter().enumerate() {
            out.push_str(&format!("{i},{t}\n"));
        }
        out
    }
}

/// Runs the first `batches · batch_size` events once untimed, then
/// `iterations` timed passes, resetting the scorer before each.
pub fn latency_bench(
    scorer: &mut dyn BatchScorer,
    events: &[EdgeEvent],
    config: BenchConfig,
    dataset: &str,
    model: &str,
) -> Result<LatencyReport> {
    let BenchConfig { batches, batch_size, iterations } = config;
    if batches == 0 || batch_size == 0 || iterations == 0 {
        return Err(Error::Config("batches, batch_size and iterations must be positive".into()));
    }
    let needed = batches * batch_size;
    if events.len() < needed {
        return Err(Error::Invalid(format!(
            "need {needed} events for {batches} batches of {batch_size}, have {}",
            events.len()
        )));
    }
    let events = &events[..needed];

    let mut run = |timed: bool, per_batch: &mut [f64]| -> Result<(f64, usize)> {
        scorer.reset();
        let mut scored = 0;
        let start = Instant::now();
        for (i, batch) in events.chunks(batch_size).enumerate() {
            let t0 = Instant::now();
            scored += scorer.score_batch(batch)?;
            if timed {
                per_batch[i] += t0.elapsed().as_secs_f64();
            }
        }
        Ok((start.elapsed().as_secs_f64(), scored))
    };

    let mut batch_seconds = vec![0.0; batches];
    run(false, &mut batch_seconds)?;
    let mut iteration_seconds = Vec::with_capacity(iterations);
    let mut events_scored = 0;
    for _ in 0..iterations {
        let (secs, scored) = run(true, &mut batch_seconds)?;
        iteration_seconds.push(secs);
        events_scored = scored;
    }
    for t in &mut batch_seconds {
        *t /= iterations as f64;
    }
    let (mean_seconds, std_seconds) = mean_std(&iteration_seconds);
    Ok(LatencyReport {
        dataset: dataset.to_string(),
        model: model.to_string(),
        batches,
        batch_size,
        iterations,
        batch_seconds,
        iteration_seconds,
        mean_seconds,
        std_seconds,
        mean_batch_seconds: mean_seconds / batches as f64,
        events_per_second: needed as f64 / mean_seconds,
        events_scored,
    })
}
