use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use streamtpp_core::autodiff::{Mat, Tape};
use streamtpp_core::checkpoint::Checkpoint;
use streamtpp_core::harness::{error_rate, permutation_test, time_rmse};
use streamtpp_core::params::ParamStore;
use streamtpp_core::prompt_pool::{cosine_distance, PromptPool};
use streamtpp_core::training::{mc_plan, nll};
use streamtpp_core::{Event, EventSequence, ModelConfig, PromptMode, PromptTpp};

fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, dim).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn pool(m: usize, dim: usize, seed: u64) -> (ParamStore<f64>, PromptPool) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = PromptPool::new(&mut store, &mut rng, m, 2, dim / 2, dim).unwrap();
    (store, p)
}

/// Exact two-sided sign-flip p-value over all 2^n assignments.
fn exact_sign_flip_p(d: &[f64]) -> f64 {
    let n = d.len();
    let obs = d.iter().sum::<f64>().abs();
    let mut hits = 0usize;
    for mask in 0..(1usize << n) {
        let s: f64 = d.iter().enumerate().map(|(i, &x)| if mask >> i & 1 == 1 { -x } else { x }).sum();
        if s.abs() >= obs - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / (1usize << n) as f64
}

fn tiny_model(mode: PromptMode) -> ModelConfig {
    ModelConfig {
        num_types: 3,
        type_dim: 4,
        time_dim: 4,
        encoder_layers: 1,
        pool_size: 4,
        top_n: 2,
        prompt_len: 2,
        prompt_mode: mode,
        ..Default::default()
    }
}

fn events_strategy(num_types: usize, horizon: f64) -> impl Strategy<Value = Vec<Event<f64>>> {
    prop::collection::vec((1..=num_types, 0.01f64..horizon), 0..8).prop_map(|mut v| {
        v.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        v.dedup_by(|a, b| (a.1 - b.1).abs() < 1e-6);
        v.into_iter().map(|(e, t)| Event::new(e, t)).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_distance_is_bounded_and_symmetric(a in vec_strategy(6), b in vec_strategy(6)) {
        let d = cosine_distance(&a, &b).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&d));
        prop_assert!((d - cosine_distance(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(cosine_distance(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn retrieval_ignores_query_scale(q in vec_strategy(8), c in 0.01f64..100.0, seed in 0u64..1000) {
        let (store, p) = pool(10, 8, seed);
        let scaled: Vec<f64> = q.iter().map(|x| x * c).collect();
        let a = p.retrieve(&store, &q, 4).unwrap();
        let b = p.retrieve(&store, &scaled, 4).unwrap();
        prop_assert_eq!(a.indices, b.indices);
        for (x, y) in a.distances.iter().zip(&b.distances) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn retrieval_is_sorted_and_distinct(q in vec_strategy(8), seed in 0u64..1000, n in 1usize..=10) {
        let (store, p) = pool(10, 8, seed);
        let r = p.retrieve(&store, &q, n).unwrap();
        prop_assert_eq!(r.indices.len(), n);
        prop_assert!(r.distances.windows(2).all(|w| w[0] <= w[1]));
        let mut idx = r.indices.clone();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), n);
        let oracle = p.match_loss(&store, &q, &r).unwrap();
        prop_assert!((oracle - r.distances.iter().sum::<f64>()).abs() < 1e-10);
    }

    #[test]
    fn attention_weights_sum_to_one(
        q in prop::collection::vec(-2.0f64..2.0, 12),
        k in prop::collection::vec(-2.0f64..2.0, 20),
        keep in prop::collection::vec(any::<bool>(), 3 * 5),
    ) {
        // With all-ones values, every output entry is the sum of one head's weights.
        let mut tape = Tape::new();
        let qv = tape.constant(Mat::from_shape_vec((3, 4), q).unwrap());
        let kv = tape.constant(Mat::from_shape_vec((5, 4), k).unwrap());
        let vv = tape.constant(Mat::from_elem((5, 4), 1.0));
        let lists: Vec<Vec<usize>> = (0..3)
            .map(|i| {
                let l: Vec<usize> = (0..5).filter(|&j| keep[i * 5 + j]).collect();
                if l.is_empty() { vec![i] } else { l }
            })
            .collect();
        let out = tape.attend(qv, kv, vv, lists, 2);
        for x in tape.value(out).iter() {
            prop_assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn error_rate_bounds(truth in prop::collection::vec(1usize..5, 1..50), flips in prop::collection::vec(any::<bool>(), 50)) {
        let preds: Vec<usize> = truth.iter().zip(&flips).map(|(&t, &f)| if f { t % 4 + 1 } else { t }).collect();
        let e = error_rate(&preds, &truth).unwrap();
        let wrong = truth.iter().zip(&flips).filter(|(_, &f)| f).count();
        prop_assert_eq!(e, wrong as f64 / truth.len() as f64);
        prop_assert_eq!(error_rate(&truth, &truth).unwrap(), 0.0);
    }

    #[test]
    fn rmse_of_constant_shift(truth in prop::collection::vec(-50.0f64..50.0, 1..40), c in -5.0f64..5.0) {
        let preds: Vec<f64> = truth.iter().map(|t| t + c).collect();
        prop_assert!((time_rmse(&preds, &truth).unwrap() - c.abs()).abs() < 1e-9);
        prop_assert_eq!(time_rmse(&truth, &truth).unwrap(), 0.0);
    }

    #[test]
    fn mc_weights_cover_the_horizon(
        times in prop::collection::vec(0.0f64..10.0, 0..12),
        mc in 1usize..200,
        seed in 0u64..100,
    ) {
        let mut times = times;
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = mc_plan(&times, 10.0, mc, &mut rng);
        prop_assert!((plan.weights.iter().sum::<f64>() - 10.0).abs() < 1e-9);
        for (&t, &h) in plan.times.iter().zip(&plan.hist) {
            prop_assert!(t > 0.0 && t <= 10.0);
            prop_assert_eq!(h, times.iter().filter(|&&x| x < t).count());
        }
    }

    #[test]
    fn constant_intensity_nll_matches_closed_form(
        rates in prop::collection::vec(0.1f64..5.0, 3),
        events in events_strategy(3, 5.0),
        mc in 1usize..50,
    ) {
        let mut m = PromptTpp::<f64>::new(tiny_model(PromptMode::PreT), 1).unwrap();
        m.force_constant_intensity(&rates).unwrap();
        let seq = EventSequence::new("s", (0.0, 5.0), events.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = nll(&m, &seq, mc, &mut rng).unwrap().nll();
        let oracle = 5.0 * rates.iter().sum::<f64>() - events.iter().map(|e| rates[e.type_id - 1].ln()).sum::<f64>();
        prop_assert!((got - oracle).abs() < 1e-6 * oracle.abs().max(1.0), "{got} vs {oracle}");
    }

    #[test]
    fn intensities_are_positive_and_causal(events in events_strategy(3, 5.0), extra in 0.0f64..5.0, seed in 0u64..50) {
        let m = PromptTpp::<f64>::new(tiny_model(PromptMode::PreT), seed).unwrap();
        let t = events.last().map_or(0.0, |e| e.time) + 0.01;
        let lam = m.intensities(&events, 0.0, &[t]).unwrap();
        prop_assert!(lam[0].iter().all(|&x| x > 0.0 && x.is_finite()));
        // appending a later event leaves earlier encodings untouched
        let mut more = events.clone();
        more.push(Event::new(1, t + extra));
        let a = m.encode(&EventSequence::new("a", (0.0, 11.0), events.clone(), 3).unwrap());
        let b = m.encode(&EventSequence::new("b", (0.0, 11.0), more, 3).unwrap());
        prop_assert_eq!(&a[..], &b[..events.len()]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permutation_test_agrees_with_exact_enumeration(
        d in prop::collection::vec(-1.0f64..1.0, 4..10),
        seed in 0u64..1000,
    ) {
        let b = vec![0.0; d.len()];
        let exact = exact_sign_flip_p(&d);
        let perms = 20_000;
        let p = permutation_test(&d, &b, perms, seed).unwrap();
        let se = (exact * (1.0 - exact) / perms as f64).sqrt();
        prop_assert!((p - exact).abs() <= 5.0 * se + 2.0 / perms as f64, "{p} vs exact {exact}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in 0u64..1000) {
        let m = PromptTpp::<f64>::new(tiny_model(PromptMode::ProT), seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::capture(&m, None).save(&path).unwrap();
        let back: PromptTpp<f64> = Checkpoint::load(&path).unwrap().restore().unwrap();
        for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert!(a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(m.config, back.config);
    }
}

use streamtpp_core::IntensityModel;

#[test]
fn single_precision_model_runs() {
    let m = streamtpp_core::PromptTpp32::new(tiny_model(PromptMode::PreT), 2).unwrap();
    let events = vec![Event::new(1, 0.5f32), Event::new(3, 1.25)];
    let lam = m.intensities(&events, 0.0, &[2.0]).unwrap();
    assert!(lam[0].iter().all(|&x| x > 0.0 && x.is_finite()));
    let lam64 = PromptTpp::<f64>::new(tiny_model(PromptMode::PreT), 2)
        .unwrap()
        .intensities(&[Event::new(1, 0.5), Event::new(3, 1.25)], 0.0, &[2.0])
        .unwrap();
    for (a, b) in lam[0].iter().zip(&lam64[0]) {
        assert!((*a as f64 - b).abs() < 1e-4 * b.max(1.0));
    }
}
