//! Timestep intervals and per-interval confidence thresholds.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `count` half-open ranges `[⌊jT/N⌋, ⌊(j+1)T/N⌋)` over the 0-based timeline
/// `[0, T)`. Timestep `t ∈ 1..=T` sits at position `t − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepIntervals {
    horizon: usize,
    count: usize,
}

impl TimestepIntervals {
    pub fn new(horizon: usize, count: usize) -> Result<Self> {
        if count == 0 || count > horizon {
            return Err(Error::invalid(
                "timestep intervals",
                alloc::format!("{count} intervals over {horizon} timesteps"),
            ));
        }
        Ok(Self { horizon, count })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// 0-based `[lo, hi)` bounds of interval `j`.
    pub fn bounds(&self, j: usize) -> (usize, usize) {
        (j * self.horizon / self.count, (j + 1) * self.horizon / self.count)
    }

    pub fn all_bounds(&self) -> Vec<(usize, usize)> {
        (0..self.count).map(|j| self.bounds(j)).collect()
    }

    /// Interval containing the 1-based timestep `t`.
    pub fn index_of(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.horizon {
            return Err(Error::TimestepOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok((t * self.count - 1) / self.horizon)
    }

    /// A 1-based timestep drawn uniformly from interval `j`.
    pub fn sample_t<R: Rng + ?Sized>(&self, j: usize, rng: &mut R) -> usize {
        let (lo, hi) = self.bounds(j);
        rng.random_range(lo..hi) + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdParams {
    pub intervals: usize,
    /// Base quantile of the per-interval confidences.
    pub percentile: f64,
    /// Intervals measured below this accuracy get a raised quantile.
    pub acc_floor: f64,
    pub raise_step: f64,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self {
            intervals: 10,
            percentile: 0.8,
            acc_floor: 0.7,
            raise_step: 0.05,
        }
    }
}

fn fraction_in(what: &'static str, v: f64, lo_open: bool, hi_open: bool) -> Result<()> {
    let lo_ok = if lo_open { v > 0.0 } else { v >= 0.0 };
    let hi_ok = if hi_open { v < 1.0 } else { v <= 1.0 };
    if lo_ok && hi_ok {
        Ok(())
    } else {
        Err(Error::invalid(what, alloc::format!("{v} is out of range")))
    }
}

impl ThresholdParams {
    pub fn validate(&self) -> Result<()> {
        fraction_in("threshold percentile", self.percentile, true, true)?;
        fraction_in("accuracy floor", self.acc_floor, false, false)?;
        fraction_in("raise step", self.raise_step, true, false)?;
        if self.intervals == 0 {
            return Err(Error::invalid("threshold intervals", "must be positive"));
        }
        Ok(())
    }
}

/// Nearest-rank quantile of an ascending, non-empty slice: the value at rank
/// `⌈q·n⌉` (1-based). A tolerance absorbs the rounding of sums like
/// `0.8 + 0.05` so that exact ranks stay exact.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = (libm::ceil(q * n as f64 - 1e-9) as usize).clamp(1, n);
    sorted[rank - 1]
}

mod inf_as_null {
    use alloc::vec::Vec;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| x.is_finite().then_some(*x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

/// Confidence thresholds of one self-training iteration. An empty interval
/// has `τ = +∞` (written as `null`) and accepts nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub iteration: usize,
    pub horizon: usize,
    /// 0-based `[lo, hi)` timestep ranges.
    pub intervals: Vec<(usize, usize)>,
    #[serde(with = "inf_as_null")]
    pub tau: Vec<f64>,
    /// Thresholds before the accuracy gate.
    #[serde(with = "inf_as_null")]
    pub base_tau: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Accumulated number of raise steps per interval.
    pub raise_levels: Vec<usize>,
    /// Confidences seen per interval.
    pub counts: Vec<usize>,
}

impl ThresholdTable {
    pub fn layout(&self) -> Result<TimestepIntervals> {
        TimestepIntervals::new(self.horizon, self.intervals.len())
    }

    pub fn threshold(&self, t: usize) -> Result<f64> {
        Ok(self.tau[self.layout()?.index_of(t)?])
    }

    /// `confidence > τ_{α(t)}`.
    pub fn accepts(&self, t: usize, confidence: f64) -> Result<bool> {
        Ok(confidence > self.threshold(t)?)
    }

    /// Same table with every threshold replaced by `tau`.
    pub fn uniform(layout: TimestepIntervals, tau: f64, iteration: usize) -> Self {
        let n = layout.count();
        Self {
            iteration,
            horizon: layout.horizon(),
            intervals: layout.all_bounds(),
            tau: vec![tau; n],
            base_tau: vec![tau; n],
            accuracy: vec![1.0; n],
            raise_levels: vec![0; n],
            counts: vec![0; n],
        }
    }
}

/// Builds the thresholds from `(t, |z|)` confidences. Every interval starts
/// at the nearest-rank `percentile`. An interval whose accuracy is below
/// `acc_floor` gains one raise level on top of its level in `previous`, and
/// levels never decay; the quantile used is `percentile + level·raise_step`,
/// capped at 1. A raise always ends strictly above the base value: if the
/// raised quantile lands on a repeated value, the next larger confidence is
/// used, and `+∞` when there is none.
pub fn build_thresholds(
    confidences: &[(usize, f64)],
    accuracy: &[f64],
    params: &ThresholdParams,
    horizon: usize,
    previous: Option<&ThresholdTable>,
    iteration: usize,
) -> Result<ThresholdTable> {
    params.validate()?;
    let layout = TimestepIntervals::new(horizon, params.intervals)?;
    let n = layout.count();
    if accuracy.len() != n {
        return Err(Error::DimensionMismatch {
            context: "interval accuracies",
            expected: n,
            got: accuracy.len(),
        });
    }
    for a in accuracy {
        fraction_in("interval accuracy", *a, false, false)?;
    }
    if let Some(p) = previous {
        if p.raise_levels.len() != n {
            return Err(Error::DimensionMismatch {
                context: "previous threshold table",
                expected: n,
                got: p.raise_levels.len(),
            });
        }
    }

    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); n];
    for &(t, conf) in confidences {
        if !(conf >= 0.0 && conf.is_finite()) {
            return Err(Error::invalid("confidence", alloc::format!("{conf}")));
        }
        buckets[layout.index_of(t)?].push(conf);
    }

    let mut table = ThresholdTable::uniform(layout, f64::INFINITY, iteration);
    table.accuracy = accuracy.to_vec();
    for (j, bucket) in buckets.iter_mut().enumerate() {
        bucket.sort_by(f64::total_cmp);
        table.counts[j] = bucket.len();
        let prev_level = previous.map_or(0, |p| p.raise_levels[j]);
        let gated = accuracy[j] < params.acc_floor;
        let level = prev_level + usize::from(gated);
        table.raise_levels[j] = level;
        if bucket.is_empty() {
            continue;
        }
        let base = nearest_rank(bucket, params.percentile);
        table.base_tau[j] = base;
        table.tau[j] = if level == 0 {
            base
        } else {
            let q = (params.percentile + level as f64 * params.raise_step).min(1.0);
            let raised = nearest_rank(bucket, q);
            if raised > base {
                raised
            } else {
                bucket
                    .iter()
                    .copied()
                    .find(|c| *c > base)
                    .unwrap_or(f64::INFINITY)
            }
        };
    }
    Ok(table)
}
