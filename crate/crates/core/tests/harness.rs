use streamtpp_core::harness::{
    emit_report, predict_targets, run_stream, run_stream_full, DataSource, Scheme, StreamConfig, StreamReport,
    TwoRegimeConfig,
};
use streamtpp_core::thinning::SamplerConfig;
use streamtpp_core::training::TrainConfig;
use streamtpp_core::ModelConfig;

fn tiny(num_tasks: usize) -> StreamConfig {
    StreamConfig {
        data: DataSource::TwoRegime(TwoRegimeConfig { num_sequences: 8, horizon: 60.0, ..Default::default() }),
        num_tasks,
        model: ModelConfig {
            type_dim: 4,
            time_dim: 4,
            encoder_layers: 1,
            pool_size: 4,
            top_n: 2,
            prompt_len: 2,
            ..Default::default()
        },
        train: TrainConfig { mc_samples: 5, max_epochs: 3, patience: 3, ..Default::default() },
        sampler: SamplerConfig { mbr_samples: 8, ..Default::default() },
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn single_task_pretrained_equals_retrained() {
    let cfg = tiny(1);
    let a = run_stream(&cfg, Scheme::Pretrained).unwrap();
    let b = run_stream(&cfg, Scheme::Retrained).unwrap();
    assert_eq!(a.tasks, b.tasks);
    assert_eq!(a.avg_error_rate, b.avg_error_rate);
    assert_eq!(a.avg_time_rmse, b.avg_time_rmse);
}

#[test]
fn no_scheme_rereads_past_training_data() {
    let cfg = tiny(3);
    for scheme in Scheme::ALL {
        let r = run_stream(&cfg, scheme).unwrap();
        assert_eq!(r.audit.rehearsal_reads, 0, "{scheme}");
        let expected = if scheme == Scheme::Pretrained { vec![1, 0, 0] } else { vec![1, 1, 1] };
        assert_eq!(r.audit.train_reads, expected, "{scheme}");
    }
}

#[test]
fn pretrained_keeps_its_first_checkpoint() {
    let run = run_stream_full::<f64>(&tiny(3), Scheme::Pretrained).unwrap();
    for m in &run.checkpoints[1..] {
        assert_eq!(m.store, run.checkpoints[0].store);
    }
    let f = run.report.forgetting.unwrap();
    for row in f.error_rate {
        for v in row.into_iter().flatten() {
            assert_eq!(v, 0.0);
        }
    }
}

#[test]
fn emitted_reports_are_byte_identical_across_runs() {
    let cfg = tiny(2);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (c1, j1) = emit_report(&run_stream(&cfg, Scheme::PromptContinual).unwrap(), d1.path()).unwrap();
    let (c2, j2) = emit_report(&run_stream(&cfg, Scheme::PromptContinual).unwrap(), d2.path()).unwrap();
    assert_eq!(std::fs::read(c1).unwrap(), std::fs::read(c2).unwrap());
    let json = std::fs::read_to_string(&j1).unwrap();
    assert_eq!(json.as_bytes(), std::fs::read(j2).unwrap());
    let back = StreamReport::from_json(&json).unwrap();
    assert_eq!(back.to_json(), json);
}

#[test]
fn predictions_do_not_depend_on_batch_composition() {
    let run = run_stream_full::<f64>(&tiny(2), Scheme::Pretrained).unwrap();
    let cfg = tiny(2);
    let seqs = cfg.data.load::<f64>(2, cfg.seed).unwrap();
    let tasks = streamtpp_core::event_store::slice_tasks(&seqs, 2, cfg.split).unwrap();
    let targets = tasks[1].test_with_history();
    let model = &run.checkpoints[1];
    let all = predict_targets(model, &targets, &cfg.sampler).unwrap();
    let mut alone = Vec::new();
    for t in targets.iter().rev() {
        let mut r = predict_targets(model, std::slice::from_ref(t), &cfg.sampler).unwrap();
        r.append(&mut alone);
        alone = r;
    }
    assert_eq!(all, alone);
}

#[test]
fn config_hash_tracks_content() {
    let a = tiny(2);
    let mut b = tiny(2);
    assert_eq!(a.hash(), b.hash());
    b.seed += 1;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
}
