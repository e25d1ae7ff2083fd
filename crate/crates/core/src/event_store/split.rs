use log::warn;
use serde::{Deserialize, Serialize};

use super::EventSequence;
use crate::error::{Result, TppError};
use crate::scalar::Scalar;

/// Train / valid / test fractions of each window's duration.
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// One continual-learning task: a time window cut chronologically into
/// train, valid and test spans.
///
/// `test_history[k]` holds the events of `test[k]`'s sequence that precede
/// the test span inside the same window; it is the conditioning prefix for
/// next-event prediction and is never used as training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit<T> {
    pub task_index: usize,
    pub window: (T, T),
    pub cuts: (T, T),
    pub train: Vec<EventSequence<T>>,
    pub valid: Vec<EventSequence<T>>,
    pub test: Vec<EventSequence<T>>,
    pub test_history: Vec<EventSequence<T>>,
}

impl<T: Scalar> TaskSplit<T> {
    /// Test sequences joined with their history: horizon starts at the window
    /// start, and targets are the events after `cuts.1`.
    pub fn test_with_history(&self) -> Vec<(EventSequence<T>, usize)> {
        self.test
            .iter()
            .zip(&self.test_history)
            .map(|(t, h)| {
                let mut events = h.events.clone();
                let first_target = events.len();
                events.extend_from_slice(&t.events);
                (
                    EventSequence {
                        seq_id: t.seq_id.clone(),
                        horizon_start: h.horizon_start,
                        horizon_end: t.horizon_end,
                        events,
                    },
                    first_target,
                )
            })
            .collect()
    }
}

fn check_ratios(ratios: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(TppError::InvalidArgument(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    Ok(())
}

/// Cuts a window-level segment at the time quantiles given by `ratios`.
/// Events are assigned by timestamp to `(start, c1]`, `(c1, c2]`, `(c2, end]`.
pub fn chrono_split<T: Scalar>(
    window_seq: &EventSequence<T>,
    ratios: (f64, f64, f64),
) -> Result<(EventSequence<T>, EventSequence<T>, EventSequence<T>)> {
    check_ratios(ratios)?;
    let (c1, c2) = cut_points(window_seq.horizon_start, window_seq.horizon_end, ratios);
    Ok((
        window_seq.clip(window_seq.horizon_start, c1),
        window_seq.clip(c1, c2),
        window_seq.clip(c2, window_seq.horizon_end),
    ))
}

fn cut_points<T: Scalar>(start: T, end: T, ratios: (f64, f64, f64)) -> (T, T) {
    let len = end - start;
    let c1 = start + len * T::of(ratios.0);
    let c2 = end - len * T::of(ratios.2);
    (c1, c2)
}

/// Cuts the global horizon into `num_tasks` equal consecutive windows and
/// splits every sequence chronologically inside each.
pub fn slice_tasks<T: Scalar>(
    sequences: &[EventSequence<T>],
    num_tasks: usize,
    ratios: (f64, f64, f64),
) -> Result<Vec<TaskSplit<T>>> {
    if num_tasks == 0 {
        return Err(TppError::InvalidArgument("num_tasks must be at least 1".into()));
    }
    check_ratios(ratios)?;
    if sequences.is_empty() {
        return Err(TppError::InvalidArgument("no sequences to slice".into()));
    }
    let start = sequences.iter().map(|s| s.horizon_start).fold(T::infinity(), T::min);
    let end = sequences.iter().map(|s| s.horizon_end).fold(T::neg_infinity(), T::max);
    let width = (end - start) / T::of(num_tasks as f64);
    let mut tasks = Vec::with_capacity(num_tasks);
    for k in 0..num_tasks {
        let ws = start + width * T::of(k as f64);
        let we = if k + 1 == num_tasks { end } else { start + width * T::of((k + 1) as f64) };
        let (c1, c2) = cut_points(ws, we, ratios);
        let mut task = TaskSplit {
            task_index: k,
            window: (ws, we),
            cuts: (c1, c2),
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
            test_history: Vec::new(),
        };
        let mut events = 0;
        for s in sequences {
            let w = s.clip(ws, we);
            events += w.len();
            task.train.push(w.clip(ws, c1));
            task.valid.push(w.clip(c1, c2));
            task.test.push(w.clip(c2, we));
            task.test_history.push(w.clip(ws, c2));
        }
        if events == 0 {
            warn!("task {k}: window ({ws}, {we}] holds no events");
        }
        tasks.push(task);
    }
    Ok(tasks)
}
