//! The prompt-augmented point process: embedding, encoder, prompt pool and
//! decoder wired into one differentiable intensity function.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::decoder::{AttachedPrompts, Decoder, PromptMode};
use crate::embedding::{EmbeddingTables, TimeEncoding};
use crate::encoder::{Encoder, EncoderKind, Query};
use crate::error::{Result, TppError};
use crate::event_store::{mean_gap, Event, EventSequence};
use crate::params::{Binder, ParamStore, Trainable};
use crate::prompt_pool::{PromptPool, RetrievalResult, TemporalBlock};
use crate::scalar::{softplus_inv, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_types: usize,
    /// `D1`
    pub type_dim: usize,
    /// `D2`
    pub time_dim: usize,
    /// `N_te`
    pub te_scale_big: f64,
    /// `n_te`
    pub te_scale_small: f64,
    pub encoder: EncoderKind,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_heads: usize,
    pub prompt_mode: PromptMode,
    pub temporal_block: TemporalBlock,
    /// `M`
    pub pool_size: usize,
    /// `N`
    pub top_n: usize,
    /// `L_p`
    pub prompt_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_types: 5,
            type_dim: 32,
            time_dim: 32,
            te_scale_big: 64.0,
            te_scale_small: 1.0,
            encoder: EncoderKind::Attention,
            encoder_layers: 2,
            encoder_heads: 2,
            decoder_heads: 2,
            prompt_mode: PromptMode::PreT,
            temporal_block: TemporalBlock::Encoded,
            pool_size: 10,
            top_n: 4,
            prompt_len: 10,
        }
    }
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        self.type_dim + self.time_dim
    }

    pub fn uses_pool(&self) -> bool {
        !matches!(self.prompt_mode, PromptMode::None)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TppError::Config(m));
        if self.num_types == 0 || self.type_dim == 0 || self.time_dim == 0 {
            return bad("num_types, type_dim and time_dim must be positive".into());
        }
        if !(self.te_scale_big > 0.0 && self.te_scale_small > 0.0) {
            return bad("time-encoding scales must be positive".into());
        }
        let d = self.dim();
        if self.encoder_heads == 0 || !d.is_multiple_of(self.encoder_heads) {
            return bad(format!("D={d} not divisible by encoder_heads={}", self.encoder_heads));
        }
        if self.decoder_heads == 0 || !d.is_multiple_of(self.decoder_heads) {
            return bad(format!("D={d} not divisible by decoder_heads={}", self.decoder_heads));
        }
        if self.encoder == EncoderKind::Attention && self.encoder_layers == 0 {
            return bad("attention encoder needs at least one layer".into());
        }
        if self.uses_pool() {
            if self.pool_size == 0 || self.prompt_len == 0 {
                return bad("pool_size and prompt_len must be positive".into());
            }
            if self.top_n > self.pool_size {
                return bad(format!("top_n={} exceeds pool_size={}", self.top_n, self.pool_size));
            }
            if self.prompt_mode == PromptMode::PreT && !self.prompt_len.is_multiple_of(2) {
                return bad(format!("prefix tuning needs an even prompt_len, got {}", self.prompt_len));
            }
            if self.prompt_mode == PromptMode::Naive && self.encoder != EncoderKind::Attention {
                return bad("naive prompting needs the attention encoder".into());
            }
        }
        Ok(())
    }

    pub fn time_encoding(&self) -> TimeEncoding {
        TimeEncoding::new(self.time_dim, self.te_scale_big, self.te_scale_small)
    }
}

/// Anything that yields conditional intensities at arbitrary times.
pub trait IntensityModel<T: Scalar> {
    fn num_types(&self) -> usize;

    /// `lambda_e(t | history before t)` for each `t` in `times` (absolute),
    /// where `origin` is the start of the observation horizon. Every time
    /// must exceed the last history event.
    fn intensities(&self, history: &[Event<T>], origin: T, times: &[T]) -> Result<Vec<Vec<T>>>;
}

#[derive(Debug, Clone)]
pub struct PromptTpp<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embedding: EmbeddingTables,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub pool: Option<PromptPool>,
}

/// Differentiable outputs of one forward pass.
pub struct ForwardOut<T> {
    /// `nq x E` intensities.
    pub intensities: Var,
    /// Retrieval per query (empty when no pool is used).
    pub retrievals: Vec<RetrievalResult<T>>,
    /// Sum of query/key cosine distances over the requested query rows.
    pub matching: Option<Var>,
}

/// Estimated conditional time for a query that follows `hist` events:
/// the last event time plus the mean inter-event gap so far.
pub fn conditional_time<T: Scalar>(times: &[T], hist: usize) -> T {
    if hist == 0 {
        return T::zero();
    }
    times[hist - 1] + mean_gap(times, T::zero(), hist)
}

impl<T: Scalar> PromptTpp<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim();
        let embedding =
            EmbeddingTables::new(&mut store, &mut rng, config.num_types, config.type_dim, config.time_encoding())?;
        let encoder = Encoder::new(
            &mut store,
            &mut rng,
            config.encoder,
            d,
            config.encoder_heads,
            config.encoder_layers,
            config.type_dim,
        )?;
        let decoder = Decoder::new(&mut store, &mut rng, d, config.decoder_heads, config.num_types)?;
        let pool = if config.uses_pool() {
            Some(PromptPool::new(&mut store, &mut rng, config.pool_size, config.prompt_len, config.type_dim, d)?)
        } else {
            None
        };
        Ok(PromptTpp { config, store, embedding, encoder, decoder, pool })
    }

    pub fn num_types(&self) -> usize {
        self.config.num_types
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    /// Zeroes the intensity MLP and sets its output bias so that every
    /// intensity equals `rates[e]` regardless of history.
    pub fn force_constant_intensity(&mut self, rates: &[T]) -> Result<()> {
        if rates.len() != self.num_types() || rates.iter().any(|&r| r <= T::zero()) {
            return Err(TppError::InvalidArgument("one positive rate per event type required".into()));
        }
        let [w1, b1, w2, b2] = self.decoder.mlp_ids();
        for id in [w1, b1, w2] {
            self.store.get_mut(id).fill(T::zero());
        }
        let bias = self.store.get_mut(b2);
        for (e, &r) in rates.iter().enumerate() {
            bias[[0, e]] = softplus_inv(r);
        }
        Ok(())
    }

    /// Builds intensities for `queries` on a sequence with times relative to
    /// its origin. Matching distances are summed over `match_rows`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        types: &[usize],
        times: &[T],
        queries: &[Query<T>],
        match_rows: &[usize],
    ) -> Result<ForwardOut<T>> {
        for (k, q) in queries.iter().enumerate() {
            if q.hist > times.len() || (q.hist > 0 && q.time <= times[q.hist - 1]) {
                return Err(TppError::InvalidArgument(format!("query {k} at {} is not after its history", q.time)));
            }
        }
        let store = binder.store();
        let te = self.config.time_encoding();
        let block = self.config.temporal_block;
        let t_p: Vec<T> = queries.iter().map(|q| conditional_time(times, q.hist)).collect();
        let mode = self.config.prompt_mode;
        let (h_dec, retrievals, matching) = match (mode, &self.pool) {
            (PromptMode::None, _) => {
                let enc = self.encoder.encode(tape, binder, &self.embedding, types, times, queries);
                (self.decoder.interact(tape, binder, enc.queries, None), Vec::new(), None)
            }
            (PromptMode::PreT | PromptMode::ProT, Some(pool)) => {
                let enc = self.encoder.encode(tape, binder, &self.embedding, types, times, queries);
                let h = enc.queries;
                let retrievals = retrieve_rows(pool, store, tape.value(h), self.config.top_n)?;
                let selections: Vec<Vec<usize>> = retrievals.iter().map(|r| r.indices.clone()).collect();
                let lp = pool.prompt_len;
                let attached = if mode == PromptMode::PreT {
                    let (k, owner) = pool.prompt_rows(tape, binder, &selections, &t_p, 0..lp / 2, &te, block);
                    let (v, _) = pool.prompt_rows(tape, binder, &selections, &t_p, lp / 2..lp, &te, block);
                    AttachedPrompts { keys: k, values: v, owner }
                } else {
                    let (p, owner) = pool.prompt_rows(tape, binder, &selections, &t_p, 0..lp, &te, block);
                    AttachedPrompts { keys: p, values: p, owner }
                };
                let out = self.decoder.interact(tape, binder, h, Some(&attached));
                let matching = self.matching(tape, binder, pool, h, &retrievals, match_rows);
                (out, retrievals, matching)
            }
            (PromptMode::Naive, Some(pool)) => {
                let qtimes: Vec<T> = queries.iter().map(|q| q.time).collect();
                let x = self.encoder.query_token_values(store, &self.embedding, &qtimes);
                let retrievals = retrieve_rows(pool, store, &x, self.config.top_n)?;
                let selections: Vec<Vec<usize>> = retrievals.iter().map(|r| r.indices.clone()).collect();
                let lp = pool.prompt_len;
                let (p, _) = pool.prompt_rows(tape, binder, &selections, &t_p, 0..lp, &te, block);
                let h = self.encoder.encode_with_prompts(
                    tape,
                    binder,
                    &self.embedding,
                    types,
                    times,
                    queries,
                    p,
                    self.config.top_n * lp,
                );
                let out = self.decoder.interact(tape, binder, h, None);
                let matching = if match_rows.is_empty() || self.config.top_n == 0 {
                    None
                } else {
                    let xq = self.encoder.query_token_var(tape, binder, &self.embedding, &qtimes);
                    self.matching(tape, binder, pool, xq, &retrievals, match_rows)
                };
                (out, retrievals, matching)
            }
            (_, None) => return Err(TppError::Config("prompt mode requires a prompt pool".into())),
        };
        let intensities = self.decoder.intensity_var(tape, binder, h_dec);
        Ok(ForwardOut { intensities, retrievals, matching })
    }

    fn matching(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        pool: &PromptPool,
        query: Var,
        retrievals: &[RetrievalResult<T>],
        rows: &[usize],
    ) -> Option<Var> {
        let mut q_idx = Vec::new();
        let mut k_idx = Vec::new();
        for &r in rows {
            for &m in &retrievals[r].indices {
                q_idx.push(r);
                k_idx.push(m);
            }
        }
        if q_idx.is_empty() {
            return None;
        }
        let keys = binder.var(tape, pool.keys);
        let qv = tape.gather_rows(query, q_idx);
        let kv = tape.gather_rows(keys, k_idx);
        let d = tape.row_cosine_distance(qv, kv);
        Some(tape.sum(d))
    }

    /// Hidden states `h_1..h_I` of a sequence prefix.
    pub fn encode(&self, seq: &EventSequence<T>) -> Vec<Vec<T>> {
        let (types, times) = relative(&seq.events, seq.horizon_start);
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.store, Trainable::None);
        let enc = self.encoder.encode(&mut tape, &mut b, &self.embedding, &types, &times, &[]);
        match enc.events {
            Some(v) => tape.value(v).rows().into_iter().map(|r| r.to_vec()).collect(),
            None => Vec::new(),
        }
    }

    /// Hidden state at time `t` given the whole history.
    pub fn encode_at_time(&self, history: &[Event<T>], origin: T, t: T) -> Result<Vec<T>> {
        let (types, times) = relative(history, origin);
        let rel = t - origin;
        if times.last().is_some_and(|&l| rel <= l) || rel < T::zero() {
            return Err(TppError::InvalidArgument(format!("query time {t} is not after the history")));
        }
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.store, Trainable::None);
        let q = [Query { time: rel, hist: types.len() }];
        let enc = self.encoder.encode(&mut tape, &mut b, &self.embedding, &types, &times, &q);
        Ok(tape.value(enc.queries).row(0).to_vec())
    }

    /// Value-only intensities plus the retrieval made for each query.
    pub fn intensities_with_retrieval(
        &self,
        history: &[Event<T>],
        origin: T,
        times: &[T],
    ) -> Result<(Vec<Vec<T>>, Vec<RetrievalResult<T>>)> {
        let (types, rel) = relative(history, origin);
        let queries: Vec<Query<T>> = times
            .iter()
            .map(|&t| {
                let t = t - origin;
                Query { time: t, hist: rel.partition_point(|&x| x < t) }
            })
            .collect();
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.store, Trainable::None);
        let out = self.forward(&mut tape, &mut b, &types, &rel, &queries, &[])?;
        let lam = tape.value(out.intensities).rows().into_iter().map(|r| r.to_vec()).collect();
        Ok((lam, out.retrievals))
    }
}

impl<T: Scalar> IntensityModel<T> for PromptTpp<T> {
    fn num_types(&self) -> usize {
        self.config.num_types
    }

    fn intensities(&self, history: &[Event<T>], origin: T, times: &[T]) -> Result<Vec<Vec<T>>> {
        Ok(self.intensities_with_retrieval(history, origin, times)?.0)
    }
}

/// Types and origin-relative times of a history.
pub fn relative<T: Scalar>(events: &[Event<T>], origin: T) -> (Vec<usize>, Vec<T>) {
    (events.iter().map(|e| e.type_id).collect(), events.iter().map(|e| e.time - origin).collect())
}

fn retrieve_rows<T: Scalar>(
    pool: &PromptPool,
    store: &ParamStore<T>,
    queries: &Mat<T>,
    n: usize,
) -> Result<Vec<RetrievalResult<T>>> {
    queries.rows().into_iter().map(|r| pool.retrieve(store, r.as_slice().expect("row-major"), n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: PromptMode, encoder: EncoderKind) -> ModelConfig {
        ModelConfig {
            num_types: 3,
            type_dim: 4,
            time_dim: 4,
            te_scale_big: 8.0,
            te_scale_small: 2.0,
            encoder,
            encoder_layers: 2,
            encoder_heads: 2,
            decoder_heads: 2,
            prompt_mode: mode,
            temporal_block: TemporalBlock::Encoded,
            pool_size: 5,
            top_n: 2,
            prompt_len: 4,
        }
    }

    fn seq() -> EventSequence<f64> {
        let ev = vec![Event::new(1, 0.5), Event::new(3, 1.25), Event::new(2, 2.0), Event::new(1, 3.5)];
        EventSequence::new("s", (0.0, 5.0), ev, 3).unwrap()
    }

    #[test]
    fn conditional_time_uses_running_mean() {
        let times = [1.0, 4.0, 5.0];
        assert_eq!(conditional_time(&times, 0), 0.0);
        assert_eq!(conditional_time(&times, 1), 2.0);
        assert_eq!(conditional_time(&times, 2), 6.0);
    }

    #[test]
    fn encoders_are_causal() {
        for kind in [EncoderKind::Attention, EncoderKind::DecayRecurrent] {
            let m = PromptTpp::<f64>::new(small(PromptMode::PreT, kind), 3).unwrap();
            let s = seq();
            let h = m.encode(&s);
            assert_eq!(h.len(), 4);
            assert!(h.iter().all(|r| r.len() == 8));
            let mut s2 = s.clone();
            s2.events[3].time = 4.9;
            s2.events[2].type_id = 3;
            let h2 = m.encode(&s2);
            assert_eq!(h[0], h2[0]);
            assert_eq!(h[1], h2[1]);
            assert_ne!(h[2], h2[2]);
        }
    }

    #[test]
    fn recurrent_zero_parameters_give_zero_state() {
        let mut m = PromptTpp::<f64>::new(small(PromptMode::None, EncoderKind::DecayRecurrent), 1).unwrap();
        for p in m.store.iter_mut() {
            if p.name.starts_with("enc.cell") {
                p.value.fill(0.0);
            }
        }
        let s = EventSequence::new("one", (0.0, 2.0), vec![Event::new(2, 1.0)], 3).unwrap();
        assert!(m.encode(&s)[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_state_decays_and_is_continuous() {
        let mut m = PromptTpp::<f64>::new(small(PromptMode::None, EncoderKind::DecayRecurrent), 2).unwrap();
        let id = m.store.find("enc.cell.decay_raw").unwrap();
        m.store.get_mut(id).fill(0.3);
        let s = seq();
        let last = m.encode(&s).pop().unwrap();
        let near = m.encode_at_time(&s.events, 0.0, 3.5 + 1e-9).unwrap();
        for (a, b) in last.iter().zip(&near) {
            assert!((a - b).abs() < 1e-8);
        }
        let far = m.encode_at_time(&s.events, 0.0, 1e6).unwrap();
        assert!(far.iter().all(|v| v.abs() < 1e-12));
        assert!(m.encode_at_time(&s.events, 0.0, 3.5).is_err());
    }

    #[test]
    fn attention_query_state_is_continuous_in_time() {
        let m = PromptTpp::<f64>::new(small(PromptMode::None, EncoderKind::Attention), 2).unwrap();
        let s = seq();
        let a = m.encode_at_time(&s.events, 0.0, 3.5 + 1e-9).unwrap();
        let b = m.encode_at_time(&s.events, 0.0, 3.5 + 2e-9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(a, m.encode_at_time(&s.events, 0.0, 3.5 + 1e-9).unwrap());
    }

    #[test]
    fn all_modes_give_positive_intensities() {
        for (mode, kind) in [
            (PromptMode::None, EncoderKind::Attention),
            (PromptMode::PreT, EncoderKind::Attention),
            (PromptMode::ProT, EncoderKind::Attention),
            (PromptMode::Naive, EncoderKind::Attention),
            (PromptMode::PreT, EncoderKind::DecayRecurrent),
        ] {
            let m = PromptTpp::<f64>::new(small(mode, kind), 4).unwrap();
            let s = seq();
            let lam = m.intensities(&s.events, 0.0, &[3.6, 4.0, 9.0]).unwrap();
            assert_eq!(lam.len(), 3);
            for row in lam {
                assert_eq!(row.len(), 3);
                assert!(row.iter().all(|&l| l > 0.0 && l.is_finite()));
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small(PromptMode::PreT, EncoderKind::Attention);
        c.prompt_len = 3;
        assert!(c.validate().is_err());
        c.prompt_mode = PromptMode::ProT;
        assert!(c.validate().is_ok());
        c.top_n = 6;
        assert!(c.validate().is_err());
        let mut c = small(PromptMode::Naive, EncoderKind::DecayRecurrent);
        assert!(c.validate().is_err());
        c.prompt_mode = PromptMode::None;
        c.encoder_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forced_constant_intensity() {
        let mut m = PromptTpp::<f64>::new(small(PromptMode::PreT, EncoderKind::Attention), 4).unwrap();
        m.force_constant_intensity(&[2.0, 1.0, 0.5]).unwrap();
        let lam = m.intensities(&seq().events, 0.0, &[4.0, 7.0]).unwrap();
        for row in lam {
            for (l, want) in row.iter().zip([2.0, 1.0, 0.5]) {
                assert!((l - want).abs() < 1e-12);
            }
        }
    }
}
