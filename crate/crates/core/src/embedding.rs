//! Event embeddings: a learned type table concatenated with a deterministic
//! sinusoidal encoding of continuous time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Result, TppError};
use crate::params::{normal_init, Binder, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Hyperparameters of the continuous-time encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEncoding {
    pub dim: usize,
    /// `N_te`
    pub scale_big: f64,
    /// `n_te`
    pub scale_small: f64,
}

impl TimeEncoding {
    pub fn new(dim: usize, scale_big: f64, scale_small: f64) -> Self {
        TimeEncoding { dim, scale_big, scale_small }
    }

    pub fn encode<T: Scalar>(&self, t: T) -> Vec<T> {
        temporal_encoding(t, self.dim, self.scale_big, self.scale_small)
    }

    /// One encoded row per time.
    pub fn encode_rows<T: Scalar>(&self, times: &[T]) -> Mat<T> {
        let mut m = Mat::zeros((times.len(), self.dim));
        for (r, &t) in times.iter().enumerate() {
            for (c, v) in self.encode(t).into_iter().enumerate() {
                m[[r, c]] = v;
            }
        }
        m
    }
}

/// Dimension `d` (1-based) is `cos(t/n * (5N/n)^((d-1)/D2))` for odd `d` and
/// `sin(t/n * (5N/n)^(d/D2))` for even `d`.
pub fn temporal_encoding<T: Scalar>(t: T, dim: usize, scale_big: f64, scale_small: f64) -> Vec<T> {
    let base = 5.0 * scale_big / scale_small;
    let x = t.f64() / scale_small;
    (1..=dim)
        .map(|d| {
            if d % 2 == 1 {
                T::of((x * base.powf((d - 1) as f64 / dim as f64)).cos())
            } else {
                T::of((x * base.powf(d as f64 / dim as f64)).sin())
            }
        })
        .collect()
}

/// Type table and time-encoding settings; `D = D1 + D2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTables {
    pub num_types: usize,
    pub type_dim: usize,
    pub time: TimeEncoding,
    pub(crate) type_table: ParamId,
}

impl EmbeddingTables {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        num_types: usize,
        type_dim: usize,
        time: TimeEncoding,
    ) -> Result<Self> {
        if type_dim == 0 || time.dim == 0 || num_types == 0 {
            return Err(TppError::Config("embedding dims and num_types must be at least 1".into()));
        }
        let type_table =
            store.add("embed.type_table", ParamGroup::Backbone, normal_init(rng, num_types, type_dim, 0.1));
        Ok(EmbeddingTables { num_types, type_dim, time, type_table })
    }

    pub fn dim(&self) -> usize {
        self.type_dim + self.time.dim
    }

    pub fn type_table<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> &'a Mat<T> {
        store.get(self.type_table)
    }

    /// `[type_table[e] || TE(t)]`.
    pub fn embed_event<T: Scalar>(&self, store: &ParamStore<T>, type_id: usize, t: T) -> Result<Vec<T>> {
        if type_id < 1 || type_id > self.num_types {
            return Err(TppError::InvalidArgument(format!("event type {type_id} outside 1..={}", self.num_types)));
        }
        let mut out: Vec<T> = store.get(self.type_table).row(type_id - 1).to_vec();
        out.extend(self.time.encode(t));
        Ok(out)
    }

    /// Token matrix for a batch of events (rows in order).
    pub fn embed_tokens<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        type_ids: &[usize],
        times: &[T],
    ) -> Var {
        let table = binder.var(tape, self.type_table);
        let types = tape.gather_rows(table, type_ids.iter().map(|&e| e - 1).collect());
        let te = tape.constant(self.time.encode_rows(times));
        tape.concat_cols(&[types, te])
    }
}
