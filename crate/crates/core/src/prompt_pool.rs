//! Continuous-time retrieval prompt pool.
//!
//! Each of the `M` entries pairs a learnable key with a temporal prompt
//! `[P_s ; P_t]`. Only the structural block `P_s` is stored; the temporal
//! block repeats the time encoding of the query's estimated conditional time
//! on every prompt row and is rebuilt per query.
//!
//! Top-N retrieval ranks keys by cosine distance to the query, which is
//! maximum inner product search over unit-normalized keys.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::embedding::TimeEncoding;
use crate::error::{Result, TppError};
use crate::params::{normal_init, Binder, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

/// How the temporal block of a prompt is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalBlock {
    /// Time encoding of the estimated conditional time.
    #[default]
    Encoded,
    /// Constant all-ones block (standard, time-agnostic prompt).
    Ones,
}

/// `1 - <a, b> / (|a| |b|)`, in `[0, 2]`.
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(TppError::Shape(format!("cosine distance of lengths {} and {}", a.len(), b.len())));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(TppError::InvalidArgument("cosine distance of a zero vector".into()));
    }
    let d = T::one() - dot / (na * nb);
    Ok(d.max(T::zero()).min(T::of(2.0)))
}

/// True on epochs where the pool is refreshed (`epoch % c == 0`).
pub fn refresh_gate(epoch: usize, c: usize) -> Result<bool> {
    if c < 1 {
        return Err(TppError::InvalidArgument("refresh frequency must be at least 1".into()));
    }
    Ok(epoch.is_multiple_of(c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult<T> {
    /// Pool indices, nearest first.
    pub indices: Vec<usize>,
    pub distances: Vec<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptPool {
    pub pool_size: usize,
    pub prompt_len: usize,
    pub type_dim: usize,
    pub dim: usize,
    pub(crate) keys: ParamId,
    pub(crate) structural: ParamId,
}

/// Serialized pool: shapes plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolCheckpoint {
    pub pool_size: usize,
    pub prompt_len: usize,
    pub type_dim: usize,
    pub dim: usize,
    pub keys: Vec<f64>,
    pub structural: Vec<f64>,
}

impl PromptPool {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        pool_size: usize,
        prompt_len: usize,
        type_dim: usize,
        dim: usize,
    ) -> Result<Self> {
        if pool_size == 0 || prompt_len == 0 || type_dim == 0 || type_dim > dim {
            return Err(TppError::Config(format!(
                "invalid pool shape M={pool_size} L_p={prompt_len} D1={type_dim} D={dim}"
            )));
        }
        // keys uniform on the unit sphere
        let mut keys = Mat::zeros((pool_size, dim));
        for mut row in keys.rows_mut() {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-8 {
                    for (dst, x) in row.iter_mut().zip(v) {
                        *dst = T::of(x / n);
                    }
                    break;
                }
            }
        }
        let keys = store.add("pool.keys", ParamGroup::Pool, keys);
        let structural =
            store.add("pool.structural", ParamGroup::Pool, normal_init(rng, pool_size * prompt_len, type_dim, 0.02));
        Ok(PromptPool { pool_size, prompt_len, type_dim, dim, keys, structural })
    }

    pub fn keys<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> &'a Mat<T> {
        store.get(self.keys)
    }

    /// `P_s` of entry `m`, `L_p x D1`.
    pub fn structural<T: Scalar>(&self, store: &ParamStore<T>, m: usize) -> Mat<T> {
        let s = store.get(self.structural);
        s.slice(ndarray::s![m * self.prompt_len..(m + 1) * self.prompt_len, ..]).to_owned()
    }

    /// The `n` keys nearest to `query` by cosine distance; ties go to the
    /// lowest index.
    pub fn retrieve<T: Scalar>(&self, store: &ParamStore<T>, query: &[T], n: usize) -> Result<RetrievalResult<T>> {
        if n > self.pool_size {
            return Err(TppError::InvalidArgument(format!("top-{n} from a pool of {}", self.pool_size)));
        }
        if query.len() != self.dim {
            return Err(TppError::Shape(format!("query length {} vs key length {}", query.len(), self.dim)));
        }
        let keys = store.get(self.keys);
        let mut scored = Vec::with_capacity(self.pool_size);
        for (m, k) in keys.rows().into_iter().enumerate() {
            let k = k.to_vec();
            scored.push((cosine_distance(query, &k)?, m));
        }
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        scored.truncate(n);
        Ok(RetrievalResult {
            indices: scored.iter().map(|s| s.1).collect(),
            distances: scored.iter().map(|s| s.0).collect(),
        })
    }

    fn temporal_row<T: Scalar>(&self, t_p: T, te: &TimeEncoding, block: TemporalBlock) -> Vec<T> {
        match block {
            TemporalBlock::Encoded => te.encode(t_p),
            TemporalBlock::Ones => vec![T::one(); te.dim],
        }
    }

    /// `[P_s || P_t]` for entry `m`, `L_p x D`.
    pub fn build_temporal_prompt<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        m: usize,
        t_p: T,
        te: &TimeEncoding,
        block: TemporalBlock,
    ) -> Result<Mat<T>> {
        if m >= self.pool_size {
            return Err(TppError::InvalidArgument(format!("pool entry {m} out of range")));
        }
        if self.type_dim + te.dim != self.dim {
            return Err(TppError::Shape("D1 + D2 must equal the key dimension".into()));
        }
        let s = self.structural(store, m);
        let tp = self.temporal_row(t_p, te, block);
        let mut out = Mat::zeros((self.prompt_len, self.dim));
        for r in 0..self.prompt_len {
            for c in 0..self.type_dim {
                out[[r, c]] = s[[r, c]];
            }
            for (c, &v) in tp.iter().enumerate() {
                out[[r, self.type_dim + c]] = v;
            }
        }
        Ok(out)
    }

    /// Sum of cosine distances between the query and its selected keys.
    pub fn match_loss<T: Scalar>(&self, store: &ParamStore<T>, query: &[T], result: &RetrievalResult<T>) -> Result<T> {
        let keys = store.get(self.keys);
        let mut total = T::zero();
        for &m in &result.indices {
            total += cosine_distance(query, &keys.row(m).to_vec())?;
        }
        Ok(total)
    }

    /// Stacked prompt rows for a batch of queries. For query `q` and each of
    /// its selected entries (in rank order), rows `rows` of that entry's
    /// prompt are emitted with the temporal block of `t_p[q]`.
    /// Returns the stacked `R x D` variable and the owning query of each row.
    pub fn prompt_rows<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        selections: &[Vec<usize>],
        t_p: &[T],
        rows: std::ops::Range<usize>,
        te: &TimeEncoding,
        block: TemporalBlock,
    ) -> (Var, Vec<usize>) {
        let mut idx = Vec::new();
        let mut owner = Vec::new();
        for (q, sel) in selections.iter().enumerate() {
            for &m in sel {
                for r in rows.clone() {
                    idx.push(m * self.prompt_len + r);
                    owner.push(q);
                }
            }
        }
        let mut temporal = Mat::zeros((t_p.len(), te.dim));
        for (q, &t) in t_p.iter().enumerate() {
            for (c, v) in self.temporal_row(t, te, block).into_iter().enumerate() {
                temporal[[q, c]] = v;
            }
        }
        let s = binder.var(tape, self.structural);
        let s = tape.gather_rows(s, idx);
        let t = tape.constant(temporal);
        let t = tape.gather_rows(t, owner.clone());
        (tape.concat_cols(&[s, t]), owner)
    }

    pub fn to_checkpoint<T: Scalar>(&self, store: &ParamStore<T>) -> PoolCheckpoint {
        PoolCheckpoint {
            pool_size: self.pool_size,
            prompt_len: self.prompt_len,
            type_dim: self.type_dim,
            dim: self.dim,
            keys: store.get(self.keys).iter().map(|v| v.f64()).collect(),
            structural: store.get(self.structural).iter().map(|v| v.f64()).collect(),
        }
    }

    /// Loads values from a checkpoint with a matching shape header.
    pub fn load_checkpoint<T: Scalar>(&self, store: &mut ParamStore<T>, ck: &PoolCheckpoint) -> Result<()> {
        if (ck.pool_size, ck.prompt_len, ck.type_dim, ck.dim)
            != (self.pool_size, self.prompt_len, self.type_dim, self.dim)
        {
            return Err(TppError::Shape(format!(
                "pool checkpoint header (M={}, L_p={}, D1={}, D={}) does not match the pool",
                ck.pool_size, ck.prompt_len, ck.type_dim, ck.dim
            )));
        }
        if ck.keys.len() != self.pool_size * self.dim
            || ck.structural.len() != self.pool_size * self.prompt_len * self.type_dim
        {
            return Err(TppError::Shape("pool checkpoint payload has the wrong length".into()));
        }
        let keys = Mat::from_shape_vec((self.pool_size, self.dim), ck.keys.iter().map(|&v| T::of(v)).collect())
            .map_err(|e| TppError::Shape(e.to_string()))?;
        let s = Mat::from_shape_vec(
            (self.pool_size * self.prompt_len, self.type_dim),
            ck.structural.iter().map(|&v| T::of(v)).collect(),
        )
        .map_err(|e| TppError::Shape(e.to_string()))?;
        store.get_mut(self.keys).assign(&keys);
        store.get_mut(self.structural).assign(&s);
        Ok(())
    }

    pub fn save_json<T: Scalar>(&self, store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint(store))?)?;
        Ok(())
    }

    pub fn load_json<T: Scalar>(&self, store: &mut ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
        let ck: PoolCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        self.load_checkpoint(store, &ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(m: usize, lp: usize, d1: usize, d: usize) -> (PromptPool, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = PromptPool::new(&mut store, &mut rng, m, lp, d1, d).unwrap();
        (p, store)
    }

    #[test]
    fn cosine_distance_examples() {
        assert!(cosine_distance::<f64>(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15);
        assert!((cosine_distance::<f64>(&[1.0, 0.0], &[0.0, 5.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance::<f64>(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn refresh_gate_examples() {
        assert!((0..10).all(|e| refresh_gate(e, 1).unwrap()));
        let c2: Vec<bool> = (0..6).map(|e| refresh_gate(e, 2).unwrap()).collect();
        assert_eq!(c2, vec![true, false, true, false, true, false]);
        assert!(refresh_gate(8, 4).unwrap() && refresh_gate(4, 4).unwrap() && !refresh_gate(5, 4).unwrap());
        assert!(refresh_gate(0, 0).is_err());
    }

    #[test]
    fn keys_start_on_unit_sphere() {
        let (p, store) = pool(10, 4, 3, 6);
        for k in p.keys(&store).rows() {
            assert!((k.dot(&k) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn retrieve_all_and_exact_key() {
        let (p, mut store) = pool(5, 2, 1, 4);
        let r = p.retrieve(&store, &[0.3, -0.2, 0.5, 0.1], 5).unwrap();
        let mut idx = r.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        assert!(r.distances.windows(2).all(|w| w[0] <= w[1]));
        assert!(p.retrieve(&store, &[1.0, 0.0, 0.0, 0.0], 6).is_err());

        let keys = store.get_mut(p.keys);
        keys.fill(0.0);
        keys[[3, 0]] = 1.0;
        for m in [0, 1, 2, 4] {
            keys[[m, 1 + m % 3]] = 1.0;
        }
        let r = p.retrieve(&store, &[2.0, 0.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(r.indices, vec![3]);
        assert!(p.match_loss(&store, &[1.0, 0.0, 0.0, 0.0], &r).unwrap().abs() < 1e-15);
        let r2 = RetrievalResult { indices: vec![0, 1], distances: vec![1.0, 1.0] };
        assert!((p.match_loss(&store, &[1.0, 0.0, 0.0, 0.0], &r2).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let (p, mut store) = pool(4, 2, 1, 2);
        let keys = store.get_mut(p.keys);
        for m in 0..4 {
            keys[[m, 0]] = 1.0;
            keys[[m, 1]] = if m == 2 { 5.0 } else { 1.0 };
        }
        let r = p.retrieve(&store, &[1.0, 1.0], 3).unwrap();
        assert_eq!(r.indices, vec![0, 1, 3]);
    }

    #[test]
    fn temporal_prompt_layout() {
        let (p, store) = pool(10, 10, 32, 64);
        let te = TimeEncoding::new(32, 64.0, 1.0);
        let a = p.build_temporal_prompt(&store, 2, 0.0, &te, TemporalBlock::Encoded).unwrap();
        assert_eq!(a.dim(), (10, 64));
        for r in 0..10 {
            for c in 0..32 {
                assert_eq!(a[[r, 32 + c]], if c % 2 == 0 { 1.0 } else { 0.0 });
            }
        }
        let b = p.build_temporal_prompt(&store, 2, 3.7, &te, TemporalBlock::Encoded).unwrap();
        assert_eq!(a.slice(ndarray::s![.., ..32]), b.slice(ndarray::s![.., ..32]));
        assert_ne!(a, b);
        let ones = p.build_temporal_prompt(&store, 2, 3.7, &te, TemporalBlock::Ones).unwrap();
        assert!(ones.slice(ndarray::s![.., 32..]).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (p, store) = pool(3, 4, 2, 5);
        let json = serde_json::to_string(&p.to_checkpoint(&store)).unwrap();
        let ck: PoolCheckpoint = serde_json::from_str(&json).unwrap();
        let (p2, mut store2) = {
            let mut s = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let p2 = PromptPool::new(&mut s, &mut rng, 3, 4, 2, 5).unwrap();
            (p2, s)
        };
        p2.load_checkpoint(&mut store2, &ck).unwrap();
        for (a, b) in store.get(p.keys).iter().zip(store2.get(p2.keys).iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in store.get(p.structural).iter().zip(store2.get(p2.structural).iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut bad = ck.clone();
        bad.prompt_len = 2;
        assert!(p2.load_checkpoint(&mut store2, &bad).is_err());
    }
}
