//! Runs the desk-scale two-regime stream for the three main schemes and
//! prints averages and mean forgetting.
//!
//! cargo run --release -p streamtpp-core --example two_regime -- [seed] [interleaved|blocked]

use std::time::Instant;

use streamtpp_core::harness::{run_stream, DataSource, RegimeSchedule, Scheme, StreamConfig, TwoRegimeConfig};
use streamtpp_core::thinning::SamplerConfig;
use streamtpp_core::training::TrainConfig;
use streamtpp_core::{ModelConfig, PromptMode};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let schedule = match std::env::args().nth(2).as_deref() {
        Some("blocked") => RegimeSchedule::Blocked,
        _ => RegimeSchedule::Interleaved,
    };
    let config = StreamConfig {
        data: DataSource::TwoRegime(TwoRegimeConfig { schedule, ..Default::default() }),
        model: ModelConfig {
            type_dim: 8,
            time_dim: 8,
            te_scale_small: 10.0,
            prompt_mode: PromptMode::PreT,
            ..Default::default()
        },
        train: TrainConfig { mc_samples: 20, learning_rate: 1e-3, max_epochs: 40, patience: 10, ..Default::default() },
        sampler: SamplerConfig { mbr_samples: 50, ..Default::default() },
        seed,
        ..Default::default()
    };
    for scheme in [Scheme::Pretrained, Scheme::Retrained, Scheme::PromptContinual] {
        let start = Instant::now();
        let r = run_stream(&config, scheme).expect("stream run");
        let f = r.forgetting.as_ref().unwrap();
        println!(
            "{scheme:>18}: err {:.4} rmse {:.4} forget_err {:.4} forget_rmse {:.4} ({:.1}s)",
            r.avg_error_rate.unwrap_or(f64::NAN),
            r.avg_time_rmse.unwrap_or(f64::NAN),
            f.mean_error_rate_drop.unwrap_or(f64::NAN),
            f.mean_time_rmse_drop.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
        for t in &r.tasks {
            print!("{:.2}/{} ", t.error_rate.unwrap_or(f64::NAN), t.epochs_trained);
        }
        println!();
    }
}
