//! Sliding-window continual-learning protocol: task slicing, per-scheme
//! training, next-event evaluation, forgetting analysis and reports.

mod metrics;
mod report;

pub use metrics::{error_rate, permutation_test, time_rmse};
pub use report::{
    emit_report, load_predictions, metrics_from_predictions, write_predictions, ForgettingReport, PredictionRecord,
    StreamReport, TaskMetrics,
};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::PromptMode;
use crate::error::{Result, TppError};
use crate::event_store::{generate_hawkes, generate_regime_stream, load_sequences, slice_tasks};
use crate::event_store::{EventSequence, HawkesParams, TaskSplit};
use crate::model::{IntensityModel, ModelConfig, PromptTpp};
use crate::prompt_pool::TemporalBlock;
use crate::scalar::Scalar;
use crate::thinning::{predict_next, SamplerConfig};
use crate::training::{train_sequences, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Train on the first task only.
    Pretrained,
    /// Fresh model per task.
    Retrained,
    /// One model and prompt pool carried across tasks.
    PromptContinual,
    /// As `PromptContinual` with an all-ones temporal block.
    PromptContinualStd,
}

impl Scheme {
    pub const ALL: [Scheme; 4] =
        [Scheme::Pretrained, Scheme::Retrained, Scheme::PromptContinual, Scheme::PromptContinualStd];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Pretrained => "pretrained",
            Scheme::Retrained => "retrained",
            Scheme::PromptContinual => "prompt_continual",
            Scheme::PromptContinualStd => "prompt_continual_std",
        }
    }

    pub fn uses_prompts(self) -> bool {
        matches!(self, Scheme::PromptContinual | Scheme::PromptContinualStd)
    }

    /// The model configuration this scheme trains: the base schemes drop the
    /// prompt pool, the prompt schemes require one.
    pub fn model_config(self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        match self {
            Scheme::Pretrained | Scheme::Retrained => cfg.prompt_mode = PromptMode::None,
            Scheme::PromptContinual | Scheme::PromptContinualStd => {
                if cfg.prompt_mode == PromptMode::None {
                    return Err(TppError::Config(format!("scheme {} needs a prompt mode", self.name())));
                }
                if self == Scheme::PromptContinualStd {
                    cfg.temporal_block = TemporalBlock::Ones;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = TppError;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| TppError::Config(format!("unknown scheme {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeSchedule {
    /// First half of the windows from regime A, the rest from B.
    Blocked,
    /// A, B, A, B, ...
    Interleaved,
    Custom(Vec<usize>),
}

impl RegimeSchedule {
    pub fn windows(&self, num_tasks: usize) -> Result<Vec<usize>> {
        Ok(match self {
            RegimeSchedule::Blocked => (0..num_tasks).map(|k| usize::from(2 * k >= num_tasks)).collect(),
            RegimeSchedule::Interleaved => (0..num_tasks).map(|k| k % 2).collect(),
            RegimeSchedule::Custom(s) => {
                if s.len() != num_tasks || s.iter().any(|&r| r > 1) {
                    return Err(TppError::Config("custom schedule needs one entry in {0, 1} per task".into()));
                }
                s.clone()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoRegimeConfig {
    pub regime_a: HawkesParams,
    pub regime_b: HawkesParams,
    pub schedule: RegimeSchedule,
    pub num_sequences: usize,
    pub horizon: f64,
}

impl Default for TwoRegimeConfig {
    /// Five types, both regimes with branching ratio 0.8 and about 50
    /// events per sequence over the default horizon. Regime A is driven by
    /// self-exciting types 1 and 2 with slow decay, regime B by
    /// self-exciting types 4 and 5 with faster decay. Type 3 is a shared
    /// low-rate background. Windows alternate between the regimes.
    fn default() -> Self {
        let self_exciting = |i: usize, j: usize, w: f64| {
            let mut m = vec![vec![0.0; 5]; 5];
            m[i][i] = w;
            m[j][j] = w;
            m
        };
        TwoRegimeConfig {
            regime_a: HawkesParams {
                base_rates: vec![0.045, 0.045, 0.02, 0.005, 0.005],
                excitation: self_exciting(0, 1, 0.24),
                decay: 0.3,
            },
            regime_b: HawkesParams {
                base_rates: vec![0.005, 0.005, 0.02, 0.045, 0.045],
                excitation: self_exciting(3, 4, 0.4),
                decay: 0.5,
            },
            schedule: RegimeSchedule::Interleaved,
            num_sequences: 200,
            horizon: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Jsonl { path: String, num_types: usize },
    TwoRegime(TwoRegimeConfig),
    Hawkes { params: HawkesParams, horizon: f64, num_sequences: usize },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::TwoRegime(TwoRegimeConfig::default())
    }
}

impl DataSource {
    pub fn num_types(&self) -> usize {
        match self {
            DataSource::Jsonl { num_types, .. } => *num_types,
            DataSource::TwoRegime(c) => c.regime_a.num_types(),
            DataSource::Hawkes { params, .. } => params.num_types(),
        }
    }

    pub fn load<T: Scalar>(&self, num_tasks: usize, seed: u64) -> Result<Vec<EventSequence<T>>> {
        match self {
            DataSource::Jsonl { path, num_types } => load_sequences(path, *num_types),
            DataSource::TwoRegime(c) => generate_regime_stream(
                &[c.regime_a.clone(), c.regime_b.clone()],
                &c.schedule.windows(num_tasks)?,
                c.horizon,
                c.num_sequences,
                seed,
            ),
            DataSource::Hawkes { params, horizon, num_sequences } => {
                generate_hawkes(params, *horizon, *num_sequences, seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub data: DataSource,
    pub schemes: Vec<Scheme>,
    pub num_tasks: usize,
    /// Train / validation / test fractions of each window.
    pub split: (f64, f64, f64),
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Re-evaluate earlier tasks under every later checkpoint.
    pub forgetting: bool,
    pub output_dir: Option<String>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            data: DataSource::default(),
            schemes: vec![Scheme::Pretrained, Scheme::Retrained, Scheme::PromptContinual],
            num_tasks: 10,
            split: crate::event_store::DEFAULT_SPLIT,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            seed: 0,
            forgetting: true,
            output_dir: None,
        }
    }
}

impl StreamConfig {
    /// Catches every inconsistency that would otherwise surface mid-run.
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(TppError::Config("num_tasks must be at least 1".into()));
        }
        if self.data.num_types() != self.model.num_types {
            return Err(TppError::Config(format!(
                "data has {} event types but the model expects {}",
                self.data.num_types(),
                self.model.num_types
            )));
        }
        if let DataSource::TwoRegime(c) = &self.data {
            c.schedule.windows(self.num_tasks)?;
            c.regime_a.validate()?;
            c.regime_b.validate()?;
            if c.regime_b.num_types() != c.regime_a.num_types() {
                return Err(TppError::Config("regimes disagree on the number of types".into()));
            }
        }
        let (a, b, c) = self.split;
        if !(a > 0.0 && b >= 0.0 && c > 0.0 && ((a + b + c) - 1.0).abs() < 1e-9) {
            return Err(TppError::Config("split fractions must be positive and sum to 1".into()));
        }
        for s in &self.schemes {
            s.model_config(&self.model)?;
        }
        self.train.validate()?;
        self.sampler.validate()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    /// Reads of each task's training and validation data.
    pub train_reads: Vec<usize>,
    /// Reads of a task's training data after that task completed.
    pub rehearsal_reads: usize,
}

/// Task splits behind a read counter. Training data of a sealed task counts
/// as a rehearsal read.
pub struct DataAudit<T> {
    tasks: Vec<TaskSplit<T>>,
    sealed: Vec<bool>,
    summary: AuditSummary,
}

impl<T: Scalar> DataAudit<T> {
    pub fn new(tasks: Vec<TaskSplit<T>>) -> Self {
        let n = tasks.len();
        DataAudit {
            tasks,
            sealed: vec![false; n],
            summary: AuditSummary { train_reads: vec![0; n], rehearsal_reads: 0 },
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Training and validation sequences of task `k`.
    pub fn training_data(&mut self, k: usize) -> (&[EventSequence<T>], &[EventSequence<T>]) {
        self.summary.train_reads[k] += 1;
        if self.sealed[k] {
            self.summary.rehearsal_reads += 1;
        }
        (&self.tasks[k].train, &self.tasks[k].valid)
    }

    /// Marks task `k` as complete.
    pub fn seal(&mut self, k: usize) {
        self.sealed[k] = true;
    }

    pub fn window(&self, k: usize) -> (T, T) {
        self.tasks[k].window
    }

    /// Test sequences with their in-window history and first target index.
    pub fn test_data(&self, k: usize) -> Vec<(EventSequence<T>, usize)> {
        self.tasks[k].test_with_history()
    }

    pub fn summary(&self) -> &AuditSummary {
        &self.summary
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// RNG seed of one prediction, derived from the sequence and event only.
fn target_seed(base: u64, seq_id: &str, index: usize) -> u64 {
    fnv1a(seq_id.as_bytes())
        ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn task_seed(base: u64, k: usize) -> u64 {
    base.wrapping_add((k as u64 + 1).wrapping_mul(0x9e37_79b9))
}

/// Predicts every target event from its true history. Returned records have
/// `task` set to zero; callers label them.
pub fn predict_targets<T: Scalar, M: IntensityModel<T> + ?Sized>(
    model: &M,
    targets: &[(EventSequence<T>, usize)],
    sampler: &SamplerConfig,
) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (seq, first) in targets {
        for j in *first..seq.events.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(target_seed(sampler.seed, &seq.seq_id, j));
            let p = predict_next(model, &seq.events[..j], seq.horizon_start, sampler, &mut rng)?;
            out.push(PredictionRecord {
                task: 0,
                seq_id: seq.seq_id.clone(),
                index: j,
                true_type: seq.events[j].type_id,
                true_time: seq.events[j].time.f64(),
                type_hat: p.type_hat,
                time_hat: p.time_hat.f64(),
            });
        }
    }
    Ok(out)
}

/// Everything produced by one scheme on one stream.
pub struct StreamRun<T: Scalar> {
    pub report: StreamReport,
    /// Model after each task.
    pub checkpoints: Vec<PromptTpp<T>>,
    pub predictions: Vec<PredictionRecord>,
    /// `None` for tasks on which the scheme did not train.
    pub train_logs: Vec<Option<TrainLog>>,
}

pub fn run_stream(config: &StreamConfig, scheme: Scheme) -> Result<StreamReport> {
    Ok(run_stream_full::<f64>(config, scheme)?.report)
}

/// Runs the task loop for one scheme: train as the scheme dictates, seal the
/// task, checkpoint, evaluate on the task's test split, and optionally
/// re-evaluate earlier tasks under later checkpoints.
pub fn run_stream_full<T: Scalar>(config: &StreamConfig, scheme: Scheme) -> Result<StreamRun<T>> {
    config.validate()?;
    let model_cfg = scheme.model_config(&config.model)?;
    let seqs = config.data.load::<T>(config.num_tasks, config.seed)?;
    let tasks = slice_tasks(&seqs, config.num_tasks, config.split)?;
    drop(seqs);
    let mut audit = DataAudit::new(tasks);
    let n = audit.num_tasks();

    let mut model: Option<PromptTpp<T>> = None;
    let mut source = Vec::with_capacity(n);
    let mut checkpoints = Vec::with_capacity(n);
    let mut train_logs = Vec::with_capacity(n);
    let mut metrics = Vec::with_capacity(n);
    let mut predictions = Vec::new();
    let mut evals: HashMap<(usize, usize), Vec<PredictionRecord>> = HashMap::new();
    for k in 0..n {
        let train_now = match scheme {
            Scheme::Pretrained => k == 0,
            Scheme::Retrained | Scheme::PromptContinual | Scheme::PromptContinualStd => true,
        };
        let fresh = k == 0 || scheme == Scheme::Retrained;
        if fresh {
            model = Some(PromptTpp::new(model_cfg.clone(), config.seed)?);
        }
        let m = model.as_mut().expect("model exists after task 0");
        let (train, valid) = if train_now { audit.training_data(k) } else { (&[][..], &[][..]) };
        let train_events: usize = train.iter().map(|s| s.len()).sum();
        let log = if train_now {
            let tc = TrainConfig { seed: task_seed(config.train.seed ^ config.seed, k), ..config.train.clone() };
            info!("{scheme}: training task {k} on {} sequences ({train_events} events)", train.len());
            Some(train_sequences(m, train, valid, &tc)?)
        } else {
            None
        };
        audit.seal(k);
        if train_now {
            source.push(k);
        } else {
            source.push(*source.last().expect("task 0 trains"));
        }
        checkpoints.push(m.clone());

        let mut recs = predict_targets(&*m, &audit.test_data(k), &config.sampler)?;
        for r in &mut recs {
            r.task = k;
        }
        let mut tm = metrics_from_predictions(&recs, k);
        tm.window = (audit.window(k).0.f64(), audit.window(k).1.f64());
        tm.train_events = train_events;
        tm.epochs_trained = log.as_ref().map_or(0, |l| l.epochs.len());
        info!("{scheme}: task {k} error {:?} rmse {:?}", tm.error_rate, tm.time_rmse);
        metrics.push(tm);
        evals.insert((k, source[k]), recs.clone());
        predictions.extend(recs);
        train_logs.push(log);
    }

    let forgetting = if config.forgetting {
        let tests: Vec<_> = (0..n).map(|i| audit.test_data(i)).collect();
        Some(forgetting_with_cache(&checkpoints, &source, &tests, &config.sampler, &mut evals)?)
    } else {
        None
    };
    let report = StreamReport::new(scheme, config, metrics, forgetting, audit.summary().clone());
    Ok(StreamRun { report, checkpoints, predictions, train_logs })
}

/// Entry `(i, j)` for `j >= i`: metric on task `i`'s test set under the
/// checkpoint after task `j` minus the metric under the checkpoint after
/// task `i`.
pub fn forgetting_report<T: Scalar>(
    checkpoints: &[PromptTpp<T>],
    tests: &[Vec<(EventSequence<T>, usize)>],
    sampler: &SamplerConfig,
) -> Result<ForgettingReport> {
    let source: Vec<usize> = (0..checkpoints.len()).collect();
    forgetting_with_cache(checkpoints, &source, tests, sampler, &mut HashMap::new())
}

fn forgetting_with_cache<T: Scalar>(
    checkpoints: &[PromptTpp<T>],
    source: &[usize],
    tests: &[Vec<(EventSequence<T>, usize)>],
    sampler: &SamplerConfig,
    cache: &mut HashMap<(usize, usize), Vec<PredictionRecord>>,
) -> Result<ForgettingReport> {
    let n = tests.len();
    if checkpoints.len() < n || source.len() < n {
        return Err(TppError::InvalidArgument(format!("forgetting needs {n} checkpoints, got {}", checkpoints.len())));
    }
    let mut err = vec![vec![None; n]; n];
    let mut rmse = vec![vec![None; n]; n];
    for i in 0..n {
        let mut eval = |j: usize| -> Result<TaskMetrics> {
            let key = (i, source[j]);
            if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(key) {
                let recs = predict_targets(&checkpoints[j], &tests[i], sampler)?;
                e.insert(recs);
            }
            Ok(metrics_from_predictions(&cache[&key], i))
        };
        let base = eval(i)?;
        for j in i..n {
            let later = eval(j)?;
            err[i][j] = base.error_rate.zip(later.error_rate).map(|(b, l)| l - b);
            rmse[i][j] = base.time_rmse.zip(later.time_rmse).map(|(b, l)| l - b);
        }
    }
    Ok(ForgettingReport::new(err, rmse))
}
