//! Two-stage pre-training on source tasks with overlapping parameter
//! names, then a checkpoint round trip.
//!
//! cargo run --release --example pretrain

use ftdkl::data::{ParamSpace, SourceDataset};
use ftdkl::surrogate::{load_checkpoint, pretrain, save_checkpoint, Stage, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn task(id: &str, names: &[&str], shift: f64, seed: u64) -> ftdkl::Result<SourceDataset> {
    let space = ParamSpace::new(names.iter().map(|n| ftdkl::data::Param::numeric(*n, -1.0, 1.0)).collect())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..300).map(|_| space.sample(&mut rng)).collect();
    let y = rows.iter().map(|r| r.iter().map(|v| (v - shift).powi(2)).sum()).collect();
    SourceDataset::new(id, space, rows, y)
}

fn main() -> ftdkl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let sources = vec![
        task("bowl_a", &["alpha", "beta"], 0.3, 1)?,
        task("bowl_b", &["beta", "gamma", "delta"], 0.3, 2)?,
        task("bowl_c", &["alpha", "delta"], -0.2, 3)?,
    ];
    let cfg = TrainConfig {
        epochs_mse: 60,
        epochs_elbo: 20,
        ..TrainConfig::desk()
    };
    let (model, history) = pretrain(&sources, &cfg)?;
    println!(
        "squared error {:.4} -> {:.4}; per-row ELBO {:.3} -> {:.3}",
        history.mse[0],
        history.mse.last().unwrap(),
        history.elbo[0],
        history.elbo.last().unwrap()
    );
    assert_eq!(model.stage(), Stage::Elbo);
    println!("registry: {:?}", model.registry.names());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.json");
    save_checkpoint(&model, &path)?;
    let reloaded = load_checkpoint(&path)?;
    let s = &sources[1];
    let a = model.predict(&s.space, &s.rows[..5])?;
    let b = reloaded.predict(&s.space, &s.rows[..5])?;
    println!("checkpoint is {} bytes; reloaded predictions identical: {}", std::fs::metadata(&path)?.len(), a == b);
    // Predictions are in the task's standardized units.
    let n = s.y.len() as f64;
    let mean = s.y.iter().sum::<f64>() / n;
    let sd = (s.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for (p, y) in a.iter().zip(&s.y) {
        println!("  predicted {:>6.3} ± {:.3}, observed {:>6.3}", p.mean, p.std, (y - mean) / sd);
    }
    Ok(())
}
