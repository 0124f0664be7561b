//! Transfer from six source tasks of different dimensions over a shared
//! pool of parameter names, compared against a cold-start FT-DKL and an
//! exact GP.
//!
//! cargo run --release --example heterogeneous -- [seeds] [budget]

use ftdkl::bench::{median, run_experiment, ExperimentConfig, HeteroBenchmark, Method, Problem};

fn main() -> ftdkl::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = args.first().copied().unwrap_or(3);
    let budget = args.get(1).copied().unwrap_or(25);

    let bench = HeteroBenchmark::new(0);
    for t in &bench.sources {
        println!("source {:<8} {:?}", t.id, t.names);
    }
    println!("target {:<8} {:?}", bench.target.id, bench.target.names);

    let cfg = ExperimentConfig {
        problem: Problem::Heterogeneous {
            seed: 0,
            rows_per_source: 500,
        },
        methods: vec![Method::Random, Method::Gp, Method::FtdklCold, Method::FtdklPretrained],
        seeds,
        budget,
        ..ExperimentConfig::default()
    };
    let result = run_experiment(&cfg)?;
    println!("{:<18} {:>14} {:>10}", "method", "median regret", "mean rank");
    for m in &cfg.methods {
        let regret: Vec<f64> = result.regret_at(*m, budget).into_iter().flatten().collect();
        let rank = result
            .table
            .final_rows()
            .into_iter()
            .find(|r| r.method == m.as_str())
            .map_or(f64::NAN, |r| r.rank_mean);
        println!("{:<18} {:>14.4} {:>10.2}", m.as_str(), median(&regret), rank);
    }
    Ok(())
}
