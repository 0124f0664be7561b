//! Zero-shot recommendations: rank a candidate table for an unseen task
//! using only a model pre-trained on related tasks.

use ftdkl::bench::HeteroBenchmark;
use ftdkl::bo::zero_shot_batch;
use ftdkl::surrogate::{pretrain, TrainConfig};
use ftdkl::transfer::build_target_model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ftdkl::Result<()> {
    let bench = HeteroBenchmark::new(0);
    let sources = bench.source_datasets(300, 0)?;
    let cfg = TrainConfig {
        epochs_mse: 60,
        epochs_elbo: 15,
        ..TrainConfig::desk()
    };
    let (model, _) = pretrain(&sources, &cfg)?;
    let space = bench.target.space();
    let (model, report) = build_target_model(&model, &space, 0)?;
    println!("target names {:?}, new to the model: {}", space.names(), report.mixed_names.len());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let table: Vec<Vec<f64>> = (0..2000).map(|_| space.sample(&mut rng)).collect();
    let truth: Vec<f64> = table.iter().map(|r| bench.target.eval(r).unwrap()).collect();
    let mut sorted = truth.clone();
    sorted.sort_by(f64::total_cmp);

    let picks = zero_shot_batch(&model, &space, &table, 5)?;
    for (k, p) in picks.iter().enumerate() {
        let rank = sorted.partition_point(|v| *v < truth[p.index]) + 1;
        println!(
            "#{} row {:>4}: predicted {:>6.3}, true {:.4} (rank {rank} of {})",
            k + 1,
            p.index,
            p.mean,
            truth[p.index],
            table.len()
        );
    }
    let random_first = truth[0];
    println!("for comparison, the first table row scores {random_first:.4}");
    Ok(())
}
