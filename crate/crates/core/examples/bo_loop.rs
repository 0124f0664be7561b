//! Bayesian optimization of a user-supplied objective with the exact GP
//! surrogate, once over a box and once over a fixed table of candidates.
//! The box run writes its trace to a JSONL file.

use ftdkl::bo::{bo_loop, read_trace, Domain, GpSurrogate, LoopConfig};
use ftdkl::data::{Param, ParamSpace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ftdkl::Result<()> {
    let space = ParamSpace::new(vec![
        Param::numeric("x1", -5.0, 10.0),
        Param::numeric("x2", 0.0, 15.0),
        Param::integer("restarts", 0.0, 4.0),
    ])?;
    // Branin plus a small integer penalty.
    let mut branin = |v: &[f64]| -> ftdkl::Result<f64> {
        let (x, y) = (v[0], v[1]);
        let pi = std::f64::consts::PI;
        let b = 5.1 / (4.0 * pi * pi);
        let t = (y - b * x * x + 5.0 / pi * x - 6.0).powi(2) + 10.0 * (1.0 - 1.0 / (8.0 * pi)) * x.cos() + 10.0;
        Ok(t + 0.1 * (v[2] - 2.0).abs())
    };

    let cfg = LoopConfig {
        n_init: 5,
        budget: 30,
        ..LoopConfig::default()
    };
    let dir = tempfile::tempdir()?;
    let trace_path = dir.path().join("branin.jsonl");
    let mut gp = GpSurrogate::new(&space, "gp")?;
    let trace = bo_loop(&mut branin, &space, &mut gp, Domain::Box, &cfg, Some(&trace_path))?;
    let s = trace.summary.as_ref().expect("finished run");
    println!("box: best {:.4} (global minimum 0.3979) at evaluation {}", s.best, s.best_index + 1);
    println!("     {}", serde_json::to_string(&s.best_x)?);
    println!("     trace file round-trips: {}", read_trace(&trace_path)? == trace);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table: Vec<Vec<f64>> = (0..400).map(|_| space.sample(&mut rng)).collect();
    let table_best = table.iter().map(|r| branin(r).unwrap()).fold(f64::INFINITY, f64::min);
    let mut gp = GpSurrogate::new(&space, "gp")?;
    let trace = bo_loop(&mut branin, &space, &mut gp, Domain::Candidates(&table), &cfg, None)?;
    println!(
        "table: best {:.4} after {} of {} rows (table minimum {table_best:.4})",
        trace.summary.unwrap().best,
        cfg.budget,
        table.len()
    );
    Ok(())
}
