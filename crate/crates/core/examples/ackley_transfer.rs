//! Desk-scale Ackley transfer: pre-train on an 8-D source trajectory, then
//! optimize a 12-D target whose first 8 dimensions share the source's scale
//! and offset. Compares against cold-start baselines.
//!
//! cargo run --release --example ackley_transfer -- [seeds] [jobs] [--fixed-prefix] [--methods gp,ftdkl_pretrained]

use ftdkl::bench::{median, run_experiment, ExperimentConfig, Method, Problem};

fn main() -> ftdkl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds = args.first().and_then(|s| s.parse().ok()).unwrap_or(5);
    let jobs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let fixed_prefix = args.iter().any(|a| a == "--fixed-prefix");
    let defaults = ExperimentConfig::default();
    let methods = match args.iter().position(|a| a == "--methods") {
        Some(i) => args[i + 1].split(',').map(Method::parse).collect::<ftdkl::Result<_>>()?,
        None => defaults.methods.clone(),
    };
    let cfg = ExperimentConfig {
        problem: Problem::AckleyTransfer {
            source_dim: 8,
            target_dim: 12,
            source_points: 400,
            instance_seed: 0,
            fixed_prefix,
        },
        methods,
        seeds,
        jobs,
        ..defaults
    };
    let t0 = std::time::Instant::now();
    let result = run_experiment(&cfg)?;
    println!("{} ({:.0}s)", result.problem, t0.elapsed().as_secs_f64());
    println!("{:<18} {:>12} {:>12} {:>10}  per-seed best", "method", "median best", "mean regret", "mean rank");
    for m in &cfg.methods {
        let best: Vec<f64> = result.best_at(*m, cfg.budget).into_iter().flatten().collect();
        let row = result
            .table
            .final_rows()
            .into_iter()
            .find(|r| r.method == m.as_str())
            .expect("row per method");
        let per_seed: Vec<String> = best.iter().map(|b| format!("{b:.3}")).collect();
        println!(
            "{:<18} {:>12.4} {:>12.4} {:>10.2}  {}",
            m.as_str(),
            median(&best),
            row.regret_mean,
            row.rank_mean,
            per_seed.join(" ")
        );
    }
    Ok(())
}
