//! Prompt-event interaction (multi-head attention with a prompting function)
//! followed by the softplus intensity layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Result, TppError};
use crate::params::{linear_init, Binder, ParamGroup, ParamId, ParamStore, Trainable};
use crate::scalar::Scalar;

/// How retrieved prompts are combined with the event representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Prefix tuning: prompt halves prepended to keys and values only.
    PreT,
    /// Prompt tuning: whole prompts prepended to queries, keys and values.
    ProT,
    /// Prompts prepended to the event tokens before encoding.
    Naive,
    /// No prompts.
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decoder {
    pub dim: usize,
    pub heads: usize,
    pub num_types: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

/// Prompt rows attached to a batch of queries. `owner[r]` is the query that
/// row `r` belongs to; rows of one query are contiguous and in rank order.
pub struct AttachedPrompts {
    pub keys: Var,
    pub values: Var,
    pub owner: Vec<usize>,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        dim: usize,
        heads: usize,
        num_types: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TppError::Config(format!("decoder width {dim} not divisible by {heads} heads")));
        }
        let g = ParamGroup::Backbone;
        Ok(Decoder {
            dim,
            heads,
            num_types,
            wq: store.add("dec.wq", g, linear_init(rng, dim, dim)),
            wk: store.add("dec.wk", g, linear_init(rng, dim, dim)),
            wv: store.add("dec.wv", g, linear_init(rng, dim, dim)),
            wo: store.add("dec.wo", g, linear_init(rng, dim, dim)),
            mlp_w1: store.add("dec.mlp.w1", g, linear_init(rng, dim, dim)),
            mlp_b1: store.add("dec.mlp.b1", g, Mat::zeros((1, dim))),
            mlp_w2: store.add("dec.mlp.w2", g, linear_init(rng, dim, num_types)),
            mlp_b2: store.add("dec.mlp.b2", g, Mat::zeros((1, num_types))),
        })
    }

    pub(crate) fn mlp_ids(&self) -> [ParamId; 4] {
        [self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]
    }

    /// `[z_1 || .. || z_m] W^O` with `z_i = Attn(zq W^Q_i, zk W^K_i, zv W^V_i)`;
    /// query row `i` sees key rows `lists[i]`.
    pub fn mhsa_var<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        zq: Var,
        zk: Var,
        zv: Var,
        lists: Vec<Vec<usize>>,
    ) -> Var {
        let (wq, wk, wv, wo) = (
            binder.var(tape, self.wq),
            binder.var(tape, self.wk),
            binder.var(tape, self.wv),
            binder.var(tape, self.wo),
        );
        let q = tape.matmul(zq, wq);
        let k = tape.matmul(zk, wk);
        let v = tape.matmul(zv, wv);
        let a = tape.attend(q, k, v, lists, self.heads);
        tape.matmul(a, wo)
    }

    /// Output row per query: the query attends over its own prompt key/value
    /// rows followed by itself.
    pub fn interact<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        h: Var,
        prompts: Option<&AttachedPrompts>,
    ) -> Var {
        let nq = tape.value(h).nrows();
        match prompts {
            None => {
                let lists = (0..nq).map(|q| vec![q]).collect();
                self.mhsa_var(tape, binder, h, h, h, lists)
            }
            Some(p) => {
                let r = p.owner.len();
                let mut lists: Vec<Vec<usize>> = vec![Vec::new(); nq];
                for (row, &q) in p.owner.iter().enumerate() {
                    lists[q].push(row);
                }
                for (q, l) in lists.iter_mut().enumerate() {
                    l.push(r + q);
                }
                let zk = tape.concat_rows(&[p.keys, h]);
                let zv = tape.concat_rows(&[p.values, h]);
                self.mhsa_var(tape, binder, h, zk, zv, lists)
            }
        }
    }

    /// `softplus(W2 tanh(W1 h + b1) + b2)`, one row of `E` intensities per
    /// input row.
    pub fn intensity_var<T: Scalar>(&self, tape: &mut Tape<T>, binder: &mut Binder<'_, T>, h: Var) -> Var {
        let (w1, b1, w2, b2) = (
            binder.var(tape, self.mlp_w1),
            binder.var(tape, self.mlp_b1),
            binder.var(tape, self.mlp_w2),
            binder.var(tape, self.mlp_b2),
        );
        let z = tape.matmul(h, w1);
        let z = tape.add_row(z, b1);
        let z = tape.tanh(z);
        let z = tape.matmul(z, w2);
        let z = tape.add_row(z, b2);
        tape.softplus(z)
    }

    fn check_width<T: Scalar>(&self, m: &Mat<T>, what: &str) -> Result<()> {
        if m.ncols() != self.dim {
            return Err(TppError::Shape(format!("{what} has {} columns, expected {}", m.ncols(), self.dim)));
        }
        Ok(())
    }

    /// Full multi-head attention of every query row over all key rows.
    pub fn mhsa<T: Scalar>(&self, store: &ParamStore<T>, zq: &Mat<T>, zk: &Mat<T>, zv: &Mat<T>) -> Result<Mat<T>> {
        self.check_width(zq, "query")?;
        self.check_width(zk, "key")?;
        self.check_width(zv, "value")?;
        if zk.nrows() != zv.nrows() || zk.nrows() == 0 {
            return Err(TppError::Shape(format!("{} key rows vs {} value rows", zk.nrows(), zv.nrows())));
        }
        let mut tape = Tape::new();
        let mut b = Binder::new(store, Trainable::None);
        let (q, k, v) = (tape.constant(zq.clone()), tape.constant(zk.clone()), tape.constant(zv.clone()));
        let all: Vec<usize> = (0..zk.nrows()).collect();
        let out = self.mhsa_var(&mut tape, &mut b, q, k, v, vec![all; zq.nrows()]);
        Ok(tape.value(out).clone())
    }

    /// Prefix tuning: each `L_p x D` prompt splits row-wise into a key half and
    /// a value half; keys `[P^K || h]`, values `[P^V || h]`, query `h`.
    pub fn prefix_tune<T: Scalar>(&self, store: &ParamStore<T>, h: &[T], prompts: &[Mat<T>]) -> Result<Vec<T>> {
        let (pk, pv) = split_prefix(prompts, self.dim)?;
        let hrow = row(h);
        self.check_width(&hrow, "query")?;
        let zk = stack(&pk, &hrow);
        let zv = stack(&pv, &hrow);
        Ok(self.mhsa(store, &hrow, &zk, &zv)?.row(0).to_vec())
    }

    /// Prompt tuning: `[P || h]` serves as query, key and value alike; the
    /// output has `L_p * N + 1` rows and the last belongs to the event.
    pub fn prompt_tune<T: Scalar>(&self, store: &ParamStore<T>, h: &[T], prompts: &[Mat<T>]) -> Result<Mat<T>> {
        for p in prompts {
            self.check_width(p, "prompt")?;
        }
        let hrow = row(h);
        self.check_width(&hrow, "query")?;
        let views: Vec<Mat<T>> = prompts.to_vec();
        let z = stack(&views, &hrow);
        self.mhsa(store, &z, &z, &z)
    }

    pub fn intensity<T: Scalar>(&self, store: &ParamStore<T>, h_dec: &[T]) -> Result<Vec<T>> {
        let hrow = row(h_dec);
        self.check_width(&hrow, "decoder state")?;
        let mut tape = Tape::new();
        let mut b = Binder::new(store, Trainable::None);
        let h = tape.constant(hrow);
        let out = self.intensity_var(&mut tape, &mut b, h);
        Ok(tape.value(out).row(0).to_vec())
    }
}

fn row<T: Scalar>(v: &[T]) -> Mat<T> {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

fn stack<T: Scalar>(parts: &[Mat<T>], last: &Mat<T>) -> Mat<T> {
    let mut views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    views.push(last.view());
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
}

/// Splits each prompt into its first and second halves of rows.
pub fn split_prefix<T: Scalar>(prompts: &[Mat<T>], dim: usize) -> Result<(Vec<Mat<T>>, Vec<Mat<T>>)> {
    let mut pk = Vec::with_capacity(prompts.len());
    let mut pv = Vec::with_capacity(prompts.len());
    for p in prompts {
        if p.nrows() % 2 != 0 {
            return Err(TppError::InvalidArgument(format!(
                "prefix tuning needs an even prompt length, got {}",
                p.nrows()
            )));
        }
        if p.ncols() != dim {
            return Err(TppError::Shape(format!("prompt has {} columns, expected {dim}", p.ncols())));
        }
        let half = p.nrows() / 2;
        pk.push(p.slice(ndarray::s![..half, ..]).to_owned());
        pv.push(p.slice(ndarray::s![half.., ..]).to_owned());
    }
    Ok((pk, pv))
}

/// Number of key/value rows seen by the query under prefix tuning.
pub fn prefix_kv_rows(prompt_len: usize, n: usize) -> usize {
    prompt_len * n / 2 + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decoder(dim: usize, heads: usize, e: usize) -> (Decoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = Decoder::new(&mut store, &mut rng, dim, heads, e).unwrap();
        (d, store)
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_key_returns_projected_value() {
        let (d, store) = decoder(4, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = rand_mat(&mut rng, 1, 4);
        let expected = v.dot(store.get(d.wv)).dot(store.get(d.wo));
        for _ in 0..3 {
            let q = rand_mat(&mut rng, 2, 4);
            let k = rand_mat(&mut rng, 1, 4);
            let out = d.mhsa(&store, &q, &k, &v).unwrap();
            assert_eq!(out.nrows(), 2);
            for r in 0..2 {
                for c in 0..4 {
                    assert!((out[[r, c]] - expected[[0, c]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let (d, mut store) = decoder(3, 1, 2);
        for id in [d.wq, d.wk, d.wv, d.wo] {
            store.get_mut(id).assign(&Mat::eye(3));
        }
        let q = ndarray::array![[1.0, 0.0, 0.0]];
        let k = ndarray::array![[0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        let v = ndarray::array![[1.0, 2.0, 3.0], [3.0, 4.0, 5.0]];
        let out = d.mhsa(&store, &q, &k, &v).unwrap();
        assert_eq!(out, ndarray::array![[2.0, 3.0, 4.0]]);
        assert!(d.mhsa(&store, &q, &k, &v.slice(ndarray::s![..1, ..]).to_owned()).is_err());
    }

    #[test]
    fn prefix_and_prompt_tuning_shapes() {
        let (d, store) = decoder(8, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h: Vec<f64> = rand_mat(&mut rng, 1, 8).iter().copied().collect();
        let self_only = h_proj(&d, &store, &h);
        let p0 = d.prefix_tune(&store, &h, &[]).unwrap();
        for (a, b) in p0.iter().zip(&self_only) {
            assert!((a - b).abs() < 1e-12);
        }
        let pt0 = d.prompt_tune(&store, &h, &[]).unwrap();
        assert_eq!(pt0.nrows(), 1);
        for (a, b) in pt0.row(0).iter().zip(&p0) {
            assert!((a - b).abs() < 1e-12);
        }
        for n in 1..5 {
            let prompts: Vec<Mat<f64>> = (0..n).map(|_| rand_mat(&mut rng, 4, 8)).collect();
            assert_eq!(d.prefix_tune(&store, &h, &prompts).unwrap().len(), 8);
            assert_eq!(d.prompt_tune(&store, &h, &prompts).unwrap().nrows(), 4 * n + 1);
        }
        let odd = vec![rand_mat(&mut rng, 3, 8)];
        assert!(d.prefix_tune(&store, &h, &odd).is_err());
        assert_eq!(prefix_kv_rows(10, 4), 21);
    }

    fn h_proj(d: &Decoder, store: &ParamStore<f64>, h: &[f64]) -> Vec<f64> {
        let hr = row(h);
        hr.dot(store.get(d.wv)).dot(store.get(d.wo)).iter().copied().collect()
    }

    #[test]
    fn zero_mlp_gives_ln2() {
        let (d, mut store) = decoder(4, 2, 3);
        for id in d.mlp_ids() {
            store.get_mut(id).fill(0.0);
        }
        let lam = d.intensity(&store, &[0.3, -1.0, 2.0, 0.1]).unwrap();
        assert_eq!(lam.len(), 3);
        for l in lam {
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn intensities_positive_for_random_inputs() {
        let (d, store) = decoder(4, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let h: Vec<f64> = (0..4).map(|_| rng.random_range(-50.0..50.0)).collect();
            let lam = d.intensity(&store, &h).unwrap();
            assert!(lam.iter().all(|&l| l > 0.0 && l.is_finite()));
        }
    }
}
