use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::{Event, EventSequence};
use crate::error::{Result, TppError};
use crate::scalar::Scalar;

/// Multivariate Hawkes process with exponential kernels:
/// `lambda_e(t) = base_rates[e] + sum_{t_j < t} excitation[e][e_j] * exp(-decay (t - t_j))`.
///
/// `excitation[e][k]` is the jump type `e` receives from an event of type
/// `k`; the branching matrix is `excitation / decay`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HawkesParams {
    pub base_rates: Vec<f64>,
    pub excitation: Vec<Vec<f64>>,
    pub decay: f64,
}

impl HawkesParams {
    pub fn poisson(base_rates: Vec<f64>) -> Self {
        let e = base_rates.len();
        HawkesParams { base_rates, excitation: vec![vec![0.0; e]; e], decay: 1.0 }
    }

    pub fn num_types(&self) -> usize {
        self.base_rates.len()
    }

    pub fn spectral_radius(&self) -> f64 {
        let e = self.num_types();
        let m = DMatrix::from_fn(e, e, |i, j| self.excitation[i][j] / self.decay);
        m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.num_types();
        if e == 0 {
            return Err(TppError::InvalidArgument("hawkes: no event types".into()));
        }
        if self.base_rates.iter().any(|&m| !(m >= 0.0 && m.is_finite())) {
            return Err(TppError::InvalidArgument("hawkes: base rates must be finite and nonnegative".into()));
        }
        if self.excitation.len() != e || self.excitation.iter().any(|r| r.len() != e) {
            return Err(TppError::InvalidArgument(format!("hawkes: excitation must be {e}x{e}")));
        }
        if self.excitation.iter().flatten().any(|&a| !(a >= 0.0 && a.is_finite())) {
            return Err(TppError::InvalidArgument("hawkes: excitation must be finite and nonnegative".into()));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(TppError::InvalidArgument("hawkes: decay must be positive".into()));
        }
        let rho = self.spectral_radius();
        if rho >= 1.0 {
            return Err(TppError::InvalidArgument(format!(
                "hawkes: spectral radius {rho:.4} of excitation/decay must be below 1"
            )));
        }
        Ok(())
    }

    /// Ogata thinning on `(start, end]`. The intensity only decays between
    /// events, so its current value bounds it until the next acceptance.
    fn simulate(&self, start: f64, end: f64, rng: &mut ChaCha8Rng) -> Vec<Event<f64>> {
        let e = self.num_types();
        let mut excite = vec![0.0; e];
        let mut events = Vec::new();
        let mut t = start;
        loop {
            let bound: f64 = self.base_rates.iter().sum::<f64>() + excite.iter().sum::<f64>();
            if bound <= 0.0 {
                break;
            }
            let gap = Exp::new(bound).expect("positive rate").sample(rng);
            t += gap;
            if t > end {
                break;
            }
            let f = (-self.decay * gap).exp();
            excite.iter_mut().for_each(|x| *x *= f);
            let rates: Vec<f64> = self.base_rates.iter().zip(&excite).map(|(m, x)| m + x).collect();
            let total: f64 = rates.iter().sum();
            let u: f64 = rng.random();
            if u * bound <= total {
                let mut pick = rng.random::<f64>() * total;
                let mut k = e - 1;
                for (i, r) in rates.iter().enumerate() {
                    if pick < *r {
                        k = i;
                        break;
                    }
                    pick -= r;
                }
                for (i, x) in excite.iter_mut().enumerate() {
                    *x += self.excitation[i][k];
                }
                events.push(Event::new(k + 1, t));
            }
        }
        events
    }
}

fn to_sequence<T: Scalar>(id: String, start: f64, end: f64, events: Vec<Event<f64>>) -> EventSequence<T> {
    EventSequence {
        seq_id: id,
        horizon_start: T::of(start),
        horizon_end: T::of(end),
        events: events.into_iter().map(|e| Event::new(e.type_id, T::of(e.time))).collect(),
    }
}

/// Draws `num_seqs` sequences on `(0, horizon]`; deterministic given `seed`.
pub fn generate_hawkes<T: Scalar>(
    params: &HawkesParams,
    horizon: f64,
    num_seqs: usize,
    seed: u64,
) -> Result<Vec<EventSequence<T>>> {
    params.validate()?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(TppError::InvalidArgument("hawkes: horizon must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..num_seqs)
        .map(|k| to_sequence(format!("seq-{k}"), 0.0, horizon, params.simulate(0.0, horizon, &mut rng)))
        .collect())
}

/// A stream whose generating law switches between regimes at fixed,
/// equal-length windows: window `w` of `(0, horizon]` is simulated from
/// `regimes[schedule[w]]` with fresh excitation state.
pub fn generate_regime_stream<T: Scalar>(
    regimes: &[HawkesParams],
    schedule: &[usize],
    horizon: f64,
    num_seqs: usize,
    seed: u64,
) -> Result<Vec<EventSequence<T>>> {
    if schedule.is_empty() {
        return Err(TppError::InvalidArgument("regime schedule is empty".into()));
    }
    let e = regimes.first().map(|r| r.num_types()).unwrap_or(0);
    for r in regimes {
        r.validate()?;
        if r.num_types() != e {
            return Err(TppError::InvalidArgument("regimes disagree on the number of types".into()));
        }
    }
    if let Some(&bad) = schedule.iter().find(|&&s| s >= regimes.len()) {
        return Err(TppError::InvalidArgument(format!("schedule refers to missing regime {bad}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(TppError::InvalidArgument("hawkes: horizon must be positive".into()));
    }
    let width = horizon / schedule.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..num_seqs)
        .map(|k| {
            let mut events = Vec::new();
            for (w, &r) in schedule.iter().enumerate() {
                let (a, b) = (w as f64 * width, (w + 1) as f64 * width);
                events.extend(regimes[r].simulate(a, b, &mut rng));
            }
            to_sequence(format!("seq-{k}"), 0.0, horizon, events)
        })
        .collect())
}
