//! Flags batches whose backward pass costs far more than usual.

use serde::{Deserialize, Serialize};

use super::GradientRecord;

pub const DEFAULT_MEDIAN_MULTIPLE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    /// More than the configured multiple of the running median.
    MedianMultiple,
    /// At or over the absolute budget, or reported as diverged.
    Budget,
}

/// Diagnosis for one flagged batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub batch: usize,
    pub backward_nfe: usize,
    /// Median of the batches seen before this one (0 when none).
    pub median_nfe: f64,
    /// `backward_nfe / median_nfe`, absent when there is no positive median.
    pub ratio: Option<f64>,
    pub reason: FlagReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WatchdogSummary {
    pub batches: usize,
    pub median_nfe: Option<f64>,
    pub max_nfe: Option<usize>,
    pub flagged: Vec<DivergenceRecord>,
}

/// Streaming detector over per-batch backward NFE.
#[derive(Debug, Clone)]
pub struct DivergenceWatchdog {
    multiple: f64,
    budget: usize,
    seen: Vec<usize>,
    flagged: Vec<DivergenceRecord>,
}

fn median(sorted: &[usize]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2] as f64),
        _ => Some((sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0),
    }
}

impl DivergenceWatchdog {
    pub fn new(multiple: f64, budget: usize) -> Self {
        Self {
            multiple,
            budget,
            seen: Vec::new(),
            flagged: Vec::new(),
        }
    }

    fn running_median(&self) -> Option<f64> {
        let mut sorted = self.seen.clone();
        sorted.sort_unstable();
        median(&sorted)
    }

    /// Feed one batch; returns its diagnosis when flagged.
    pub fn observe(&mut self, batch: usize, backward_nfe: usize, diverged: bool) -> Option<DivergenceRecord> {
        let med = self.running_median();
        let ratio = med.filter(|&m| m > 0.0).map(|m| backward_nfe as f64 / m);
        let reason = if diverged || backward_nfe >= self.budget {
            Some(FlagReason::Budget)
        } else if ratio.is_some_and(|r| r > self.multiple) {
            Some(FlagReason::MedianMultiple)
        } else {
            None
        };
        self.seen.push(backward_nfe);
        let record = reason.map(|reason| DivergenceRecord {
            batch,
            backward_nfe,
            median_nfe: med.unwrap_or(0.0),
            ratio,
            reason,
        });
        if let Some(r) = &record {
            log::warn!(
                "batch {} backward pass took {} evaluations ({:?} x median)",
                r.batch,
                r.backward_nfe,
                r.ratio
            );
            self.flagged.push(r.clone());
        }
        record
    }

    pub fn observe_record(&mut self, batch: usize, record: &GradientRecord) -> Option<DivergenceRecord> {
        self.observe(batch, record.backward_nfe, record.diverged)
    }

    pub fn summary(&self) -> WatchdogSummary {
        let mut sorted = self.seen.clone();
        sorted.sort_unstable();
        WatchdogSummary {
            batches: self.seen.len(),
            median_nfe: median(&sorted),
            max_nfe: sorted.last().copied(),
            flagged: self.flagged.clone(),
        }
    }

    /// Run a whole stream through a fresh watchdog.
    pub fn summarize<'a>(
        multiple: f64,
        budget: usize,
        records: impl IntoIterator<Item = &'a GradientRecord>,
    ) -> WatchdogSummary {
        let mut dog = Self::new(multiple, budget);
        for (i, r) in records.into_iter().enumerate() {
            dog.observe_record(r.batch.unwrap_or(i), r);
        }
        dog.summary()
    }
}
