//! Event sequences: the data model, JSONL ingestion, synthetic Hawkes
//! streams, and sliding-window task slicing.

mod hawkes;
mod jsonl;
mod split;

pub use hawkes::{generate_hawkes, generate_regime_stream, HawkesParams};
pub use jsonl::{load_sequences, parse_sequences, save_sequences, write_sequences};
pub use split::{chrono_split, slice_tasks, TaskSplit, DEFAULT_SPLIT};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TppError};
use crate::scalar::Scalar;

/// One event `e@t`. Type ids are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event<T> {
    pub type_id: usize,
    pub time: T,
}

impl<T> Event<T> {
    pub fn new(type_id: usize, time: T) -> Self {
        Event { type_id, time }
    }
}

/// Time-ordered events observed on `(horizon_start, horizon_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence<T> {
    pub seq_id: String,
    pub horizon_start: T,
    pub horizon_end: T,
    pub events: Vec<Event<T>>,
}

impl<T: Scalar> EventSequence<T> {
    /// Builds a sequence and checks every invariant.
    pub fn new(seq_id: impl Into<String>, horizon: (T, T), events: Vec<Event<T>>, num_types: usize) -> Result<Self> {
        let seq = EventSequence { seq_id: seq_id.into(), horizon_start: horizon.0, horizon_end: horizon.1, events };
        seq.validate(num_types)?;
        Ok(seq)
    }

    pub fn validate(&self, num_types: usize) -> Result<()> {
        let err = |msg: String| TppError::Validation { seq_id: self.seq_id.clone(), msg };
        if !(self.horizon_start.is_finite() && self.horizon_end.is_finite()) {
            return Err(err("horizon is not finite".into()));
        }
        if self.horizon_start >= self.horizon_end {
            return Err(err(format!("horizon start {} is not before end {}", self.horizon_start, self.horizon_end)));
        }
        let mut prev = self.horizon_start;
        for (i, ev) in self.events.iter().enumerate() {
            if ev.type_id < 1 || ev.type_id > num_types {
                return Err(err(format!("event {i}: type {} outside 1..={num_types}", ev.type_id)));
            }
            if !ev.time.is_finite() || ev.time < T::zero() {
                return Err(err(format!("event {i}: time {} is not a finite nonnegative value", ev.time)));
            }
            if ev.time <= prev {
                return Err(err(format!(
                    "event {i}: time {} is not strictly after {} (timestamps must increase)",
                    ev.time, prev
                )));
            }
            if ev.time > self.horizon_end {
                return Err(err(format!("event {i}: time {} beyond horizon end {}", ev.time, self.horizon_end)));
            }
            prev = ev.time;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration(&self) -> T {
        self.horizon_end - self.horizon_start
    }

    /// Inter-event times; the first is measured from `horizon_start`.
    pub fn inter_event_times(&self) -> Vec<T> {
        let mut prev = self.horizon_start;
        self.events
            .iter()
            .map(|e| {
                let tau = e.time - prev;
                prev = e.time;
                tau
            })
            .collect()
    }

    /// Events falling in `(start, end]`, re-homed on that horizon.
    pub fn clip(&self, start: T, end: T) -> EventSequence<T> {
        EventSequence {
            seq_id: self.seq_id.clone(),
            horizon_start: start,
            horizon_end: end,
            events: self.events.iter().filter(|e| e.time > start && e.time <= end).copied().collect(),
        }
    }
}

/// Mean of the first `count` inter-event gaps of `times`, measured from
/// `start`; zero for an empty history.
pub fn mean_gap<T: Scalar>(times: &[T], start: T, count: usize) -> T {
    if count == 0 {
        return T::zero();
    }
    // the gaps telescope
    (times[count - 1] - start) / T::of(count as f64)
}

/// Mean of `{tau_j : j < i}` for the 1-based event index `i`.
pub fn mean_inter_event_time<T: Scalar>(seq: &EventSequence<T>, i: usize) -> Result<T> {
    if i < 1 || i > seq.len() {
        return Err(TppError::InvalidArgument(format!("event index {i} outside 1..={}", seq.len())));
    }
    let times: Vec<T> = seq.events.iter().map(|e| e.time).collect();
    Ok(mean_gap(&times, seq.horizon_start, i - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(times: &[f64]) -> EventSequence<f64> {
        let events = times.iter().map(|&t| Event::new(1, t)).collect();
        EventSequence::new("s", (0.0, 100.0), events, 1).unwrap()
    }

    #[test]
    fn mean_inter_event_time_examples() {
        // taus 1.0, 3.0
        let s = seq(&[1.0, 4.0, 5.0]);
        assert_eq!(mean_inter_event_time(&s, 3).unwrap(), 2.0);
        assert_eq!(mean_inter_event_time(&s, 1).unwrap(), 0.0);
        let s = seq(&[2.0, 3.0]);
        assert_eq!(mean_inter_event_time(&s, 2).unwrap(), 2.0);
        assert!(mean_inter_event_time(&s, 0).is_err());
        assert!(mean_inter_event_time(&s, 3).is_err());
    }

    #[test]
    fn validation_rejects_bad_sequences() {
        let ev = |e, t| Event::new(e, t);
        assert!(EventSequence::new("x", (0.0, 10.0), vec![ev(1, 2.0), ev(1, 1.0)], 2).is_err());
        assert!(EventSequence::new("x", (0.0, 10.0), vec![ev(1, 2.0), ev(1, 2.0)], 2).is_err());
        assert!(EventSequence::new("x", (0.0, 10.0), vec![ev(3, 2.0)], 2).is_err());
        assert!(EventSequence::new("x", (0.0, 10.0), vec![ev(0, 2.0)], 2).is_err());
        assert!(EventSequence::new("x", (0.0, 10.0), vec![ev(1, 11.0)], 2).is_err());
        assert!(EventSequence::new("x", (0.0, 10.0), vec![ev(1, f64::NAN)], 2).is_err());
        assert!(EventSequence::<f64>::new("x", (5.0, 5.0), vec![], 2).is_err());
        assert!(EventSequence::new("x", (0.0, 10.0), vec![ev(1, 1.0), ev(2, 10.0)], 2).is_ok());
    }

    #[test]
    fn inter_event_times_start_at_horizon() {
        let s = EventSequence::new("s", (1.0, 9.0), vec![Event::new(1, 2.0), Event::new(1, 4.5)], 1).unwrap();
        assert_eq!(s.inter_event_times(), vec![1.0, 2.5]);
    }
}
