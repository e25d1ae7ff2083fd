//! Monte-Carlo likelihood, the matching-regularized loss, and the per-task
//! training loop.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::encoder::Query;
use crate::error::{Result, TppError};
use crate::event_store::{EventSequence, TaskSplit};
use crate::model::{relative, PromptTpp};
use crate::params::{Binder, ParamGroup, ParamStore, Trainable};
use crate::prompt_pool::refresh_gate;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the query/key matching term.
    pub alpha: f64,
    pub mc_samples: usize,
    /// Pool parameters are updated only on epochs divisible by this.
    pub refresh_c: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            mc_samples: 100,
            refresh_c: 2,
            learning_rate: 1e-3,
            batch_size: 1,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TppError::Config(m.into()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and non-negative");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if self.refresh_c == 0 {
            return bad("refresh_c must be at least 1");
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("learning_rate, batch_size and max_epochs must be positive");
        }
        if self.max_grad_norm.is_some_and(|n| !(n > 0.0)) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    /// `sum_i log lambda_{e_i}(t_i)`
    pub nll_event: T,
    /// Estimated integral of the total intensity over the horizon.
    pub nll_nonevent: T,
    pub matching: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn nll(&self) -> T {
        self.nll_nonevent - self.nll_event
    }
}

/// Frozen Monte-Carlo sample points for the non-event integral, with times
/// relative to the sequence origin.
#[derive(Debug, Clone, PartialEq)]
pub struct McPlan<T> {
    pub times: Vec<T>,
    /// Number of events strictly before each sample.
    pub hist: Vec<usize>,
    pub weights: Vec<T>,
}

/// Spreads about `mc_samples` uniform points over the inter-event intervals
/// of `(0, horizon]`, proportionally to interval length with at least one
/// per nonempty interval. Each point is weighted by `length / count` of its
/// interval.
pub fn mc_plan<T: Scalar, R: Rng>(times: &[T], horizon: T, mc_samples: usize, rng: &mut R) -> McPlan<T> {
    let mut plan = McPlan { times: Vec::new(), hist: Vec::new(), weights: Vec::new() };
    let total = horizon.f64();
    if total <= 0.0 {
        return plan;
    }
    let mut lo = T::zero();
    for k in 0..=times.len() {
        let hi = if k < times.len() { times[k] } else { horizon };
        let len = hi - lo;
        if len > T::zero() {
            let n = ((mc_samples as f64 * len.f64() / total).round() as usize).max(1);
            let w = len / T::of(n as f64);
            for _ in 0..n {
                let u: f64 = 1.0 - rng.random::<f64>();
                let mut t = lo + len * T::of(u);
                if t <= lo {
                    t = hi;
                }
                plan.times.push(t);
                plan.hist.push(k);
                plan.weights.push(w);
            }
        }
        lo = hi;
    }
    plan
}

/// Records the loss graph of one sequence on `tape`. Returns the scalar
/// total-loss variable and its value breakdown.
pub fn loss_on_tape<T: Scalar>(
    model: &PromptTpp<T>,
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    seq: &EventSequence<T>,
    plan: &McPlan<T>,
    alpha: T,
) -> Result<(Var, LossBreakdown<T>)> {
    let (types, times) = relative(&seq.events, seq.horizon_start);
    let n_ev = types.len();
    let mut queries: Vec<Query<T>> = times.iter().enumerate().map(|(i, &t)| Query { time: t, hist: i }).collect();
    queries.extend(plan.times.iter().zip(&plan.hist).map(|(&t, &h)| Query { time: t, hist: h }));
    let match_rows: Vec<usize> = if alpha > T::zero() { (0..n_ev).collect() } else { Vec::new() };
    let out = model.forward(tape, binder, &types, &times, &queries, &match_rows)?;
    let lam = out.intensities;

    let mut weights = Mat::zeros((queries.len(), model.num_types()));
    for (k, &w) in plan.weights.iter().enumerate() {
        weights.row_mut(n_ev + k).fill(w);
    }
    let nonevent = tape.weighted_sum(lam, weights);
    let nonevent_v = tape.scalar(nonevent);

    let mut total = nonevent;
    let mut event_v = T::zero();
    if n_ev > 0 {
        let idx: Vec<(usize, usize)> = types.iter().enumerate().map(|(i, &e)| (i, e - 1)).collect();
        let picked = tape.gather_elems(lam, idx);
        if let Some((i, v)) = tape.value(picked).iter().enumerate().find(|(_, v)| !(**v > T::zero())) {
            return Err(TppError::Numerical(format!(
                "intensity {v} at event {i} of sequence {} is not positive",
                seq.seq_id
            )));
        }
        let logs = tape.log(picked);
        let event = tape.sum(logs);
        event_v = tape.scalar(event);
        total = tape.sub(total, event);
    }
    let mut match_v = T::zero();
    if let Some(m) = out.matching {
        match_v = tape.scalar(m);
        let scaled = tape.scale(m, alpha);
        total = tape.add(total, scaled);
    }
    let breakdown =
        LossBreakdown { nll_event: event_v, nll_nonevent: nonevent_v, matching: match_v, total: tape.scalar(total) };
    Ok((total, breakdown))
}

/// Loss value on a frozen sample plan, without gradients.
pub fn total_loss_with_plan<T: Scalar>(
    model: &PromptTpp<T>,
    seq: &EventSequence<T>,
    plan: &McPlan<T>,
    alpha: T,
) -> Result<LossBreakdown<T>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.store, Trainable::None);
    Ok(loss_on_tape(model, &mut tape, &mut binder, seq, plan, alpha)?.1)
}

/// Negative log-likelihood with a fresh sample plan; `matching` is zero.
pub fn nll<T: Scalar, R: Rng>(
    model: &PromptTpp<T>,
    seq: &EventSequence<T>,
    mc_samples: usize,
    rng: &mut R,
) -> Result<LossBreakdown<T>> {
    let (_, times) = relative(&seq.events, seq.horizon_start);
    let plan = mc_plan(&times, seq.duration(), mc_samples, rng);
    total_loss_with_plan(model, seq, &plan, T::zero())
}

/// NLL plus `alpha` times the summed query/key distances of every event.
pub fn total_loss<T: Scalar, R: Rng>(
    model: &PromptTpp<T>,
    seq: &EventSequence<T>,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<LossBreakdown<T>> {
    let (_, times) = relative(&seq.events, seq.horizon_start);
    let plan = mc_plan(&times, seq.duration(), config.mc_samples, rng);
    total_loss_with_plan(model, seq, &plan, T::of(config.alpha))
}

/// Adam with bias correction counted per parameter, so parameters that skip
/// steps keep consistent moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    steps: Vec<i32>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Mat<T>> = store.iter().map(|(_, p)| Mat::zeros(p.value.dim())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, steps: vec![0; store.len()] }
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Mat<T>>]) {
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        for (i, p) in store.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            self.steps[i] += 1;
            let t = self.steps[i];
            let c1 = T::of(1.0 - self.beta1.powi(t));
            let c2 = T::of(1.0 - self.beta2.powi(t));
            let (lr, eps) = (T::of(self.lr), T::of(self.eps));
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean total loss per training sequence.
    pub train_loss: f64,
    /// Mean NLL per validation sequence.
    pub valid_nll: f64,
    pub refreshed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_nll: f64,
    pub stopped_early: bool,
    /// Shuffling/sampling RNG after the last epoch, for checkpoints.
    #[serde(skip)]
    pub rng_state: Option<ChaCha8Rng>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,valid_nll,refreshed\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, e.valid_nll, e.refreshed);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Trains on one task's training split with early stopping on its
/// validation split.
pub fn train_task<T: Scalar>(model: &mut PromptTpp<T>, task: &TaskSplit<T>, config: &TrainConfig) -> Result<TrainLog> {
    train_sequences(model, &task.train, &task.valid, config)
}

/// Adam on the total loss. Backbone parameters move every epoch, pool
/// parameters only on refresh epochs. The parameters with the best
/// validation NLL are restored before returning.
pub fn train_sequences<T: Scalar>(
    model: &mut PromptTpp<T>,
    train: &[EventSequence<T>],
    valid: &[EventSequence<T>],
    config: &TrainConfig,
) -> Result<TrainLog> {
    train_sequences_observed(model, train, valid, config, |_, _| {})
}

/// [`train_sequences`] with a callback run after every epoch's updates,
/// before the early-stopping check.
pub fn train_sequences_observed<T: Scalar>(
    model: &mut PromptTpp<T>,
    train: &[EventSequence<T>],
    valid: &[EventSequence<T>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &PromptTpp<T>),
) -> Result<TrainLog> {
    config.validate()?;
    if train.is_empty() {
        return Err(TppError::InvalidArgument("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut valid_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x05ee_d0f5_a11d);
    let valid_plans: Vec<McPlan<T>> = valid
        .iter()
        .map(|s| {
            let (_, times) = relative(&s.events, s.horizon_start);
            mc_plan(&times, s.duration(), config.mc_samples, &mut valid_rng)
        })
        .collect();
    let valid_nll = |model: &PromptTpp<T>| -> Result<f64> {
        if valid.is_empty() {
            return Ok(0.0);
        }
        let mut sum = 0.0;
        for (s, p) in valid.iter().zip(&valid_plans) {
            sum += total_loss_with_plan(model, s, p, T::zero())?.nll().f64();
        }
        Ok(sum / valid.len() as f64)
    };

    let alpha = T::of(config.alpha);
    let mut adam = Adam::new(&model.store, config.learning_rate);
    let mut log = TrainLog { best_valid_nll: f64::INFINITY, ..Default::default() };
    let mut best = model.store.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.max_epochs {
        let refreshed = refresh_gate(epoch, config.refresh_c)?;
        let trainable = if refreshed { Trainable::All } else { Trainable::Backbone };
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Option<Mat<T>>> = vec![None; model.store.len()];
            for &i in batch {
                let seq = &train[i];
                let (_, times) = relative(&seq.events, seq.horizon_start);
                let plan = mc_plan(&times, seq.duration(), config.mc_samples, &mut rng);
                let mut tape = Tape::new();
                let mut binder = Binder::new(&model.store, trainable);
                let (total, parts) = loss_on_tape(model, &mut tape, &mut binder, seq, &plan, alpha)?;
                if !parts.total.is_finite() {
                    return Err(TppError::Diverged {
                        epoch,
                        msg: format!("loss {} on sequence {}", parts.total, seq.seq_id),
                    });
                }
                epoch_loss += parts.total.f64();
                let grads = binder.collect(&tape.backward(total));
                for (a, g) in acc.iter_mut().zip(grads) {
                    match (a.as_mut(), g) {
                        (Some(a), Some(g)) => *a += &g,
                        (None, Some(g)) => *a = Some(g),
                        _ => {}
                    }
                }
            }
            if let Some(max) = config.max_grad_norm {
                clip_global_norm(&mut acc, T::of(max));
            }
            adam.step(&mut model.store, &acc);
            if !model.store.all_finite() {
                return Err(TppError::Diverged { epoch, msg: "non-finite parameters after update".into() });
            }
        }
        let train_loss = epoch_loss / train.len() as f64;
        let v = valid_nll(model)?;
        if !v.is_finite() {
            return Err(TppError::Diverged { epoch, msg: format!("validation NLL {v}") });
        }
        debug!("epoch {epoch}: train {train_loss:.4} valid {v:.4} refreshed {refreshed}");
        let entry = EpochLog { epoch, train_loss, valid_nll: v, refreshed };
        on_epoch(&entry, model);
        log.epochs.push(entry);
        if v < log.best_valid_nll {
            log.best_valid_nll = v;
            log.best_epoch = epoch;
            best.copy_from(&model.store)?;
        } else if epoch - log.best_epoch >= config.patience {
            log.stopped_early = true;
            break;
        }
    }
    model.store.copy_from(&best)?;
    log.rng_state = Some(rng);
    info!("trained {} epochs, best valid NLL {:.4} at epoch {}", log.epochs.len(), log.best_valid_nll, log.best_epoch);
    Ok(log)
}

fn clip_global_norm<T: Scalar>(grads: &mut [Option<Mat<T>>], max: T) {
    let sq: T = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|&x| x * x).fold(T::zero(), |a, b| a + b))
        .fold(T::zero(), |a, b| a + b);
    let norm = sq.sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
    pub entries_checked: usize,
    /// Parameters whose analytic gradient is exactly zero everywhere.
    pub zero_gradient_params: Vec<String>,
    /// Largest relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
}

/// Gradients below this magnitude are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of the total loss with central differences
/// for every scalar parameter, with the sample plan frozen.
pub fn grad_check<T: Scalar>(
    model: &PromptTpp<T>,
    seq: &EventSequence<T>,
    epsilon: f64,
    mc_samples: usize,
    alpha: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, times) = relative(&seq.events, seq.horizon_start);
    let plan = mc_plan(&times, seq.duration(), mc_samples, &mut rng);
    let alpha = T::of(alpha);

    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.store, Trainable::All);
    let (total, _) = loss_on_tape(model, &mut tape, &mut binder, seq, &plan, alpha)?;
    let grads = binder.collect(&tape.backward(total));

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
        zero_gradient_params: Vec::new(),
        per_param: Vec::new(),
    };
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (k, (id, name)) in ids.into_iter().enumerate() {
        let analytic = grads[k].clone().unwrap_or_else(|| Mat::zeros(model.store.get(id).dim()));
        if analytic.iter().all(|&g| g == T::zero()) {
            report.zero_gradient_params.push(name.clone());
        }
        let mut worst_here: f64 = 0.0;
        let cols = analytic.ncols();
        for (flat, &a) in analytic.iter().enumerate() {
            let at = [flat / cols, flat % cols];
            let orig = probe.store.get(id)[at];
            probe.store.get_mut(id)[at] = orig + T::of(epsilon);
            let up = total_loss_with_plan(&probe, seq, &plan, alpha)?.total.f64();
            probe.store.get_mut(id)[at] = orig - T::of(epsilon);
            let down = total_loss_with_plan(&probe, seq, &plan, alpha)?.total.f64();
            probe.store.get_mut(id)[at] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = a.f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.entries_checked += 1;
            worst_here = worst_here.max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst =
                    Some(GradCheckEntry { param: name.clone(), index: flat, analytic: a, numeric, rel_error: rel });
            }
        }
        report.per_param.push((name, worst_here));
    }
    Ok(report)
}

/// Parameters of one group, e.g. to compare pools before and after an epoch.
pub fn group_snapshot<T: Scalar>(model: &PromptTpp<T>, group: ParamGroup) -> Vec<Mat<T>> {
    model.store.snapshot(group)
}
