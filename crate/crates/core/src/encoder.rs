//! History encoders `h_i = f(h_{i-1}, x_i)`.
//!
//! Two variants share one contract: a pre-norm causal self-attention stack,
//! and a gated recurrent cell whose state decays exponentially toward zero
//! across inter-event gaps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::embedding::EmbeddingTables;
use crate::error::{Result, TppError};
use crate::params::{linear_init, normal_init, Binder, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Attention,
    DecayRecurrent,
}

/// A point at which a hidden state is requested: time `time` (relative to the
/// sequence origin) conditioned on the first `hist` events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query<T> {
    pub time: T,
    pub hist: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AttnLayer {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecurrentCell {
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
    decay_raw: ParamId,
    h0: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Encoder {
    pub kind: EncoderKind,
    pub dim: usize,
    pub heads: usize,
    layers: Vec<AttnLayer>,
    final_ln: Option<(ParamId, ParamId)>,
    query_type: Option<ParamId>,
    cell: Option<RecurrentCell>,
}

/// Hidden states produced for one sequence.
pub struct Encoded {
    /// `h_1..h_I`, one row per event (absent for an empty history).
    pub events: Option<Var>,
    /// One row per query.
    pub queries: Var,
}

fn ones_row<T: Scalar>(d: usize) -> Mat<T> {
    Mat::from_elem((1, d), T::one())
}

fn zeros_row<T: Scalar>(d: usize) -> Mat<T> {
    Mat::zeros((1, d))
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        kind: EncoderKind,
        dim: usize,
        heads: usize,
        layers: usize,
        type_dim: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TppError::Config(format!("hidden size {dim} not divisible by {heads} heads")));
        }
        let g = ParamGroup::Backbone;
        let mut enc = Encoder { kind, dim, heads, layers: Vec::new(), final_ln: None, query_type: None, cell: None };
        match kind {
            EncoderKind::Attention => {
                if layers == 0 {
                    return Err(TppError::Config("attention encoder needs at least one layer".into()));
                }
                for l in 0..layers {
                    let p = |s: &str| format!("enc.layer{l}.{s}");
                    let layer = AttnLayer {
                        ln1: (store.add(p("ln1.gain"), g, ones_row(dim)), store.add(p("ln1.bias"), g, zeros_row(dim))),
                        wq: store.add(p("wq"), g, linear_init(rng, dim, dim)),
                        wk: store.add(p("wk"), g, linear_init(rng, dim, dim)),
                        wv: store.add(p("wv"), g, linear_init(rng, dim, dim)),
                        wo: store.add(p("wo"), g, linear_init(rng, dim, dim)),
                        ln2: (store.add(p("ln2.gain"), g, ones_row(dim)), store.add(p("ln2.bias"), g, zeros_row(dim))),
                        ff1: (
                            store.add(p("ff1.w"), g, linear_init(rng, dim, dim)),
                            store.add(p("ff1.b"), g, zeros_row(dim)),
                        ),
                        ff2: (
                            store.add(p("ff2.w"), g, linear_init(rng, dim, dim)),
                            store.add(p("ff2.b"), g, zeros_row(dim)),
                        ),
                    };
                    enc.layers.push(layer);
                }
                enc.final_ln = Some((
                    store.add("enc.final_ln.gain", g, ones_row(dim)),
                    store.add("enc.final_ln.bias", g, zeros_row(dim)),
                ));
                enc.query_type = Some(store.add("enc.query_type", g, normal_init(rng, 1, type_dim, 0.1)));
            }
            EncoderKind::DecayRecurrent => {
                let names = ["z", "r", "n"];
                let w = names.map(|n| store.add(format!("enc.cell.w{n}"), g, linear_init(rng, dim, dim)));
                let u = names.map(|n| store.add(format!("enc.cell.u{n}"), g, linear_init(rng, dim, dim)));
                let b = names.map(|n| store.add(format!("enc.cell.b{n}"), g, zeros_row(dim)));
                enc.cell = Some(RecurrentCell {
                    w,
                    u,
                    b,
                    decay_raw: store.add("enc.cell.decay_raw", g, zeros_row(dim)),
                    h0: store.add("enc.cell.h0", g, zeros_row(dim)),
                });
            }
        }
        Ok(enc)
    }

    /// Token for a query at time `t`: a learned type slot and the time code.
    fn query_tokens<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        emb: &EmbeddingTables,
        times: &[T],
    ) -> Var {
        let qt = binder.var(tape, self.query_type.expect("attention encoder"));
        let qt = tape.gather_rows(qt, vec![0; times.len()]);
        let te = tape.constant(emb.time.encode_rows(times));
        tape.concat_cols(&[qt, te])
    }

    /// Query-token embeddings as plain values (used by naive prompting to
    /// retrieve against `x` instead of `h`).
    pub fn query_token_values<T: Scalar>(&self, store: &ParamStore<T>, emb: &EmbeddingTables, times: &[T]) -> Mat<T> {
        let qt = store.get(self.query_type.expect("attention encoder"));
        let te = emb.time.encode_rows(times);
        let mut m = Mat::zeros((times.len(), self.dim));
        for r in 0..times.len() {
            for c in 0..qt.ncols() {
                m[[r, c]] = qt[[0, c]];
            }
            for c in 0..te.ncols() {
                m[[r, qt.ncols() + c]] = te[[r, c]];
            }
        }
        m
    }

    /// Differentiable query tokens (naive prompting's retrieval query).
    pub fn query_token_var<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        emb: &EmbeddingTables,
        times: &[T],
    ) -> Var {
        self.query_tokens(tape, binder, emb, times)
    }

    fn attn_stack<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        tokens: Var,
        lists: &[Vec<usize>],
    ) -> Var {
        let eps = T::of(1e-5);
        let mut z = tokens;
        for layer in &self.layers {
            let n = tape.layer_norm(z, eps);
            let (g1, b1) = (binder.var(tape, layer.ln1.0), binder.var(tape, layer.ln1.1));
            let n = tape.mul_row(n, g1);
            let n = tape.add_row(n, b1);
            let (wq, wk, wv, wo) = (
                binder.var(tape, layer.wq),
                binder.var(tape, layer.wk),
                binder.var(tape, layer.wv),
                binder.var(tape, layer.wo),
            );
            let q = tape.matmul(n, wq);
            let k = tape.matmul(n, wk);
            let v = tape.matmul(n, wv);
            let a = tape.attend(q, k, v, lists.to_vec(), self.heads);
            let a = tape.matmul(a, wo);
            z = tape.add(z, a);

            let n = tape.layer_norm(z, eps);
            let (g2, b2) = (binder.var(tape, layer.ln2.0), binder.var(tape, layer.ln2.1));
            let n = tape.mul_row(n, g2);
            let n = tape.add_row(n, b2);
            let (w1, c1) = (binder.var(tape, layer.ff1.0), binder.var(tape, layer.ff1.1));
            let (w2, c2) = (binder.var(tape, layer.ff2.0), binder.var(tape, layer.ff2.1));
            let f = tape.matmul(n, w1);
            let f = tape.add_row(f, c1);
            let f = tape.tanh(f);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, c2);
            z = tape.add(z, f);
        }
        let (g, b) = self.final_ln.expect("attention encoder");
        let n = tape.layer_norm(z, eps);
        let (g, b) = (binder.var(tape, g), binder.var(tape, b));
        let n = tape.mul_row(n, g);
        tape.add_row(n, b)
    }

    /// Hidden states for every history event and every query. Times are
    /// relative to the sequence origin.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        emb: &EmbeddingTables,
        types: &[usize],
        times: &[T],
        queries: &[Query<T>],
    ) -> Encoded {
        match self.kind {
            EncoderKind::Attention => self.encode_attention(tape, binder, emb, types, times, queries),
            EncoderKind::DecayRecurrent => self.encode_recurrent(tape, binder, emb, types, times, queries),
        }
    }

    fn encode_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        emb: &EmbeddingTables,
        types: &[usize],
        times: &[T],
        queries: &[Query<T>],
    ) -> Encoded {
        let n_ev = types.len();
        let qtimes: Vec<T> = queries.iter().map(|q| q.time).collect();
        let xq = self.query_tokens(tape, binder, emb, &qtimes);
        let tokens = if n_ev > 0 {
            let xe = emb.embed_tokens(tape, binder, types, times);
            tape.concat_rows(&[xe, xq])
        } else {
            xq
        };
        let mut lists: Vec<Vec<usize>> = (0..n_ev).map(|i| (0..=i).collect()).collect();
        for (k, q) in queries.iter().enumerate() {
            let mut l: Vec<usize> = (0..q.hist).collect();
            l.push(n_ev + k);
            lists.push(l);
        }
        let h = self.attn_stack(tape, binder, tokens, &lists);
        if n_ev == 0 {
            return Encoded { events: None, queries: h };
        }
        let events = tape.slice_rows(h, 0, n_ev);
        let queries = tape.slice_rows(h, n_ev, n_ev + queries.len());
        Encoded { events: Some(events), queries }
    }

    fn encode_recurrent<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        emb: &EmbeddingTables,
        types: &[usize],
        times: &[T],
        queries: &[Query<T>],
    ) -> Encoded {
        let cell = self.cell.as_ref().expect("recurrent encoder");
        let raw = binder.var(tape, cell.decay_raw);
        let delta = tape.softplus(raw);
        let h0 = binder.var(tape, cell.h0);
        let n_ev = types.len();
        let mut states = vec![h0];
        if n_ev > 0 {
            let x = emb.embed_tokens(tape, binder, types, times);
            let w: Vec<Var> = cell.w.iter().map(|&id| binder.var(tape, id)).collect();
            let u: Vec<Var> = cell.u.iter().map(|&id| binder.var(tape, id)).collect();
            let b: Vec<Var> = cell.b.iter().map(|&id| binder.var(tape, id)).collect();
            let xw: Vec<Var> = (0..3)
                .map(|g| {
                    let p = tape.matmul(x, w[g]);
                    tape.add_row(p, b[g])
                })
                .collect();
            let mut prev_t = T::zero();
            let mut h = h0;
            for (i, &t) in times.iter().enumerate().take(n_ev) {
                let gap = t - prev_t;
                prev_t = t;
                let f = tape.outer_scale(delta, vec![-gap]);
                let f = tape.exp(f);
                let hd = tape.mul(h, f);
                let xz = tape.slice_rows(xw[0], i, i + 1);
                let xr = tape.slice_rows(xw[1], i, i + 1);
                let xn = tape.slice_rows(xw[2], i, i + 1);
                let uz = tape.matmul(hd, u[0]);
                let z = tape.add(xz, uz);
                let z = tape.sigmoid(z);
                let ur = tape.matmul(hd, u[1]);
                let r = tape.add(xr, ur);
                let r = tape.sigmoid(r);
                let rh = tape.mul(r, hd);
                let un = tape.matmul(rh, u[2]);
                let n = tape.add(xn, un);
                let n = tape.tanh(n);
                // h = n + z * (hd - n)
                let diff = tape.sub(hd, n);
                let zd = tape.mul(z, diff);
                h = tape.add(n, zd);
                states.push(h);
            }
        }
        let all = tape.concat_rows(&states);
        let rows: Vec<usize> = queries.iter().map(|q| q.hist).collect();
        let gaps: Vec<T> = queries
            .iter()
            .map(|q| {
                let last = if q.hist == 0 { T::zero() } else { times[q.hist - 1] };
                -(q.time - last)
            })
            .collect();
        let base = tape.gather_rows(all, rows);
        let f = tape.outer_scale(delta, gaps);
        let f = tape.exp(f);
        let queries = tape.mul(base, f);
        let events = if n_ev > 0 { Some(tape.slice_rows(all, 1, n_ev + 1)) } else { None };
        Encoded { events, queries }
    }

    /// Attention encoder over per-query token groups
    /// `[prompt rows | history events | query token]`: prompt rows are visible
    /// to every row of their group, history rows are causal, and the query
    /// row sees the whole group. Returns one hidden row per query.
    pub fn encode_with_prompts<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        emb: &EmbeddingTables,
        types: &[usize],
        times: &[T],
        queries: &[Query<T>],
        prompt_rows: Var,
        rows_per_query: usize,
    ) -> Var {
        assert_eq!(self.kind, EncoderKind::Attention, "naive prompting needs the attention encoder");
        let n_ev = types.len();
        let nq = queries.len();
        let qtimes: Vec<T> = queries.iter().map(|q| q.time).collect();
        let xq = self.query_tokens(tape, binder, emb, &qtimes);
        let n_prompt = nq * rows_per_query;
        let mut parts = Vec::new();
        if n_prompt > 0 {
            parts.push(prompt_rows);
        }
        if n_ev > 0 {
            parts.push(emb.embed_tokens(tape, binder, types, times));
        }
        parts.push(xq);
        let base = tape.concat_rows(&parts);
        let mut order = Vec::new();
        let mut lists = Vec::new();
        let mut outputs = Vec::with_capacity(nq);
        for (k, q) in queries.iter().enumerate() {
            let o = order.len();
            let p = rows_per_query;
            let lists_local = naive_prompt_lists(p, q.hist);
            order.extend(k * p..(k + 1) * p);
            order.extend((0..q.hist).map(|j| n_prompt + j));
            order.push(n_prompt + n_ev + k);
            // the query token sees its whole group
            lists.extend(lists_local.into_iter().map(|l| l.into_iter().map(|j| o + j).collect::<Vec<_>>()));
            lists.push((o..o + p + q.hist + 1).collect());
            outputs.push(o + p + q.hist);
        }
        let stacked = tape.gather_rows(base, order);
        let h = self.attn_stack(tape, binder, stacked, &lists);
        tape.gather_rows(h, outputs)
    }
}

/// Prepends prompt rows to event tokens: `[P_1; ..; P_N; x_1; ..; x_I]`.
pub fn naive_prompt<T: Scalar>(tokens: &Mat<T>, prompts: &[Mat<T>]) -> Result<Mat<T>> {
    for p in prompts {
        if p.ncols() != tokens.ncols() {
            return Err(TppError::Shape(format!("prompt width {} vs token width {}", p.ncols(), tokens.ncols())));
        }
    }
    let mut views: Vec<_> = prompts.iter().map(|p| p.view()).collect();
    views.push(tokens.view());
    Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("widths checked"))
}

/// Attention visibility for `[prompt rows | events]`: prompt rows attend to
/// all prompt rows; event `i` attends to all prompt rows and events `<= i`.
pub fn naive_prompt_lists(prompt_rows: usize, events: usize) -> Vec<Vec<usize>> {
    let mut lists: Vec<Vec<usize>> = (0..prompt_rows).map(|_| (0..prompt_rows).collect()).collect();
    for i in 0..events {
        lists.push((0..=prompt_rows + i).collect());
    }
    lists
}
