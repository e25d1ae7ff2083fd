//! Next-event sampling by thinning, and minimum-Bayes-risk prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TppError};
use crate::event_store::Event;
use crate::model::IntensityModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub bound_grid_points: usize,
    pub bound_safety: f64,
    /// The bound grid spans this many mean inter-event times past `t0`.
    pub window_factor: f64,
    pub mbr_samples: usize,
    pub max_rejects: usize,
    pub seed: u64,
    /// Largest number of times evaluated in one model call.
    pub chunk: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            bound_grid_points: 20,
            bound_safety: 2.0,
            window_factor: 10.0,
            mbr_samples: 100,
            max_rejects: 10_000,
            seed: 0,
            chunk: 1024,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bound_grid_points == 0
            || !(self.bound_safety > 1.0)
            || !(self.window_factor > 0.0)
            || self.mbr_samples == 0
            || self.max_rejects == 0
            || self.chunk == 0
        {
            return Err(TppError::Config(
                "sampler needs positive grid, window, samples, max_rejects, chunk and a safety factor above 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction<T> {
    /// 1-based event type.
    pub type_hat: usize,
    pub time_hat: T,
}

fn last_time<T: Scalar>(history: &[Event<T>], origin: T) -> T {
    history.last().map_or(origin, |e| e.time)
}

fn eval_totals<T: Scalar, M: IntensityModel<T> + ?Sized>(
    model: &M,
    history: &[Event<T>],
    origin: T,
    times: &[T],
    chunk: usize,
) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(times.len());
    for c in times.chunks(chunk) {
        out.extend(model.intensities(history, origin, c)?);
    }
    Ok(out)
}

fn total<T: Scalar>(row: &[T]) -> T {
    row.iter().fold(T::zero(), |a, &b| a + b)
}

/// Heuristic upper bound on the total intensity after the last event:
/// the largest total intensity on an evenly spaced grid, times the safety
/// factor.
pub fn intensity_bound<T: Scalar, M: IntensityModel<T> + ?Sized>(
    model: &M,
    history: &[Event<T>],
    origin: T,
    config: &SamplerConfig,
) -> Result<T> {
    config.validate()?;
    let t0 = last_time(history, origin);
    let mut window = if history.is_empty() { T::zero() } else { (t0 - origin) / T::of(history.len() as f64) };
    window *= T::of(config.window_factor);
    if !(window > T::zero()) {
        // no usable gap statistics: scale the window by the intensity at t0
        let probe = t0 + T::of(1e-6).max(t0.abs() * T::epsilon() * T::of(16.0));
        let lam = total(&model.intensities(history, origin, &[probe])?[0]);
        window = T::of(config.window_factor) / lam.max(T::of(1e-12));
    }
    let g = config.bound_grid_points;
    let grid: Vec<T> = (1..=g).map(|k| t0 + window * T::of(k as f64 / g as f64)).collect();
    let lams = eval_totals(model, history, origin, &grid, config.chunk)?;
    let max = lams.iter().map(|r| total(r)).fold(T::zero(), T::max);
    if !(max > T::zero()) || !max.is_finite() {
        return Err(TppError::Numerical(format!("total intensity {max} on the bound grid")));
    }
    Ok(max * T::of(config.bound_safety))
}

struct Lane<T> {
    rng: ChaCha8Rng,
    t: T,
    bound: T,
    bounds: Vec<f64>,
    rejects: usize,
    result: Option<(usize, T)>,
}

/// One thinning draw of the next event after `history`.
pub fn draw_next_event<T: Scalar, M: IntensityModel<T> + ?Sized, R: Rng>(
    model: &M,
    history: &[Event<T>],
    origin: T,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<(usize, T)> {
    Ok(draw_many(model, history, origin, 1, config, rng)?[0])
}

/// `count` independent thinning draws, advanced in lockstep so each round
/// needs one batched intensity evaluation. Each lane owns an RNG stream
/// seeded from `rng`, so results do not depend on batching.
pub fn draw_many<T: Scalar, M: IntensityModel<T> + ?Sized, R: Rng>(
    model: &M,
    history: &[Event<T>],
    origin: T,
    count: usize,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<(usize, T)>> {
    let bound = intensity_bound(model, history, origin, config)?;
    let t0 = last_time(history, origin);
    let mut lanes: Vec<Lane<T>> = (0..count)
        .map(|_| Lane {
            rng: ChaCha8Rng::seed_from_u64(rng.random()),
            t: t0,
            bound,
            bounds: vec![bound.f64()],
            rejects: 0,
            result: None,
        })
        .collect();
    let mut active: Vec<usize> = (0..count).collect();
    while !active.is_empty() {
        let proposals: Vec<T> = active
            .iter()
            .map(|&i| {
                let lane = &mut lanes[i];
                let e: f64 = Exp1.sample(&mut lane.rng);
                lane.t + T::of(e) / lane.bound
            })
            .collect();
        let lams = eval_totals(model, history, origin, &proposals, config.chunk)?;
        let mut still = Vec::with_capacity(active.len());
        for ((&i, &t), lam) in active.iter().zip(&proposals).zip(&lams) {
            let lane = &mut lanes[i];
            let tot = total(lam);
            if !tot.is_finite() {
                return Err(TppError::Numerical(format!("total intensity {tot} at {t}")));
            }
            if tot > lane.bound {
                while lane.bound < tot {
                    lane.bound = lane.bound + lane.bound;
                }
                lane.bounds.push(lane.bound.f64());
                lane.t = t0;
                still.push(i);
                continue;
            }
            let u: f64 = lane.rng.random();
            if t > t0 && T::of(u) * lane.bound <= tot {
                let mut pick = T::of(lane.rng.random::<f64>()) * tot;
                let mut e = lam.len() - 1;
                for (k, &l) in lam.iter().enumerate() {
                    if pick < l {
                        e = k;
                        break;
                    }
                    pick -= l;
                }
                lane.result = Some((e + 1, t));
            } else {
                lane.rejects += 1;
                lane.t = t;
                if lane.rejects > config.max_rejects {
                    return Err(TppError::TooManyRejections {
                        max_rejects: config.max_rejects,
                        bounds: lane.bounds.clone(),
                    });
                }
                still.push(i);
            }
        }
        active = still;
    }
    Ok(lanes.into_iter().map(|l| l.result.expect("every lane finished")).collect())
}

/// Mean of `mbr_samples` draws for the time, most intense type at that time
/// for the mark (lowest type on ties).
pub fn predict_next<T: Scalar, M: IntensityModel<T> + ?Sized, R: Rng>(
    model: &M,
    history: &[Event<T>],
    origin: T,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Prediction<T>> {
    let draws = draw_many(model, history, origin, config.mbr_samples, config, rng)?;
    let time_hat = draws.iter().fold(T::zero(), |a, d| a + d.1) / T::of(draws.len() as f64);
    let t0 = last_time(history, origin);
    let time_hat = if time_hat > t0 { time_hat } else { draws.iter().map(|d| d.1).fold(T::infinity(), T::min) };
    let lam = &model.intensities(history, origin, &[time_hat])?[0];
    let mut best = 0;
    for (k, &l) in lam.iter().enumerate() {
        if l > lam[best] {
            best = k;
        }
    }
    Ok(Prediction { type_hat: best + 1, time_hat })
}
