//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 2 3`. Failing
//! criteria make the process exit nonzero only when
//! `FTDKL_ACCEPTANCE_STRICT=1`, so that the long experiment criteria can
//! report an honest FAIL without aborting the rest of the workspace run.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ftdkl::bench::{
    average_rank, median, normalized_regret, ranks, run_experiment, ExperimentConfig, ExperimentResult, Method, Problem,
};
use ftdkl::bo::{zero_shot_batch, AcquisitionConfig};
use ftdkl::cli::{cmd_optimize, cmd_pretrain, CliConfig, ColdSurrogate, ProblemSpec};
use ftdkl::data::{ParamSpace, SourceDataset};
use ftdkl::diffmath::linalg::JITTER;
use ftdkl::diffmath::Tensor;
use ftdkl::encoder::EncoderConfig;
use ftdkl::gp::{exact_lml, exact_posterior, optimal_state, svgp_elbo, KernelParams, SvgpState};
use ftdkl::surrogate::{checkpoint_bytes, pretrain, TrainConfig};
use ftdkl::transfer::{build_target_model, mix, mixup_embedding, MixOrigin};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

// 1 ----------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let results = common::gradcheck::gradient_suite();
    let secs = t.elapsed().as_secs_f64();
    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let bad: Vec<&String> = results
        .iter()
        .filter(|(_, e)| !(*e < common::gradcheck::TOLERANCE))
        .map(|(n, _)| n)
        .collect();
    outcome(
        bad.is_empty() && secs < 120.0,
        format!("{} checks, worst relative error {worst:.1e}, {} failing, {secs:.1}s", results.len(), bad.len()),
    )
}

// 2 ----------------------------------------------------------------------

/// Matérn-3/2 plus linear kernel, written out independently.
fn oracle_kernel(a: &[f64], b: &[f64], ls: f64, mv: f64, lv: f64) -> f64 {
    let r = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s = 3f64.sqrt() * r / ls;
    mv * (1.0 + s) * (-s).exp() + lv * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

fn exact_gp_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=20);
        let d = rng.random_range(1..=8);
        let q = 7;
        let ls = rng.random_range(0.3..2.0);
        let mv = rng.random_range(0.5..2.0);
        let lv = if rng.random_bool(0.5) { Some(rng.random_range(0.05..1.0)) } else { None };
        let noise = rng.random_range(1e-3..0.5);
        let x = Tensor::randn(n, d, 1.0, &mut rng);
        let xq = Tensor::randn(q, d, 1.0, &mut rng);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let params = KernelParams::new(ls, mv, lv, noise).unwrap();
        let got = exact_posterior(&x, &y, &xq, &params).unwrap();

        let lv = lv.unwrap_or(0.0);
        let k = |a: &Tensor, i: usize, b: &Tensor, j: usize| oracle_kernel(a.row_slice(i), b.row_slice(j), ls, mv, lv);
        let a = DMatrix::from_fn(n, n, |i, j| k(&x, i, &x, j) + if i == j { noise + JITTER } else { 0.0 });
        let kq = DMatrix::from_fn(n, q, |i, j| k(&x, i, &xq, j));
        let lu = a.lu();
        let alpha = lu.solve(&DVector::from_vec(y.clone())).unwrap();
        let v = lu.solve(&kq).unwrap();
        for j in 0..q {
            let mean = kq.column(j).dot(&alpha);
            let var = k(&xq, j, &xq, j) - kq.column(j).dot(&v.column(j));
            worst = worst
                .max((got[j].mean - mean).abs())
                .max((got[j].std.powi(2) - var.max(0.0)).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(worst < 1e-8 && secs < 60.0, format!("50 problems, max |difference| {worst:.1e}, {secs:.2}s"))
}

// 3 ----------------------------------------------------------------------

fn elbo_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_gap = 0.0f64;
    let mut wide = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=25);
        let d = rng.random_range(1..=4);
        let params = KernelParams::new(
            rng.random_range(0.3..2.0),
            rng.random_range(0.5..2.0),
            if rng.random_bool(0.5) { Some(rng.random_range(0.05..1.0)) } else { None },
            rng.random_range(0.01..0.5),
        )
        .unwrap();
        let x = Tensor::randn(n, d, 1.0, &mut rng);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lml = exact_lml(&x, &y, &params).unwrap();

        let m = rng.random_range(1..=n);
        let z = Tensor::randn(m, d, 1.0, &mut rng);
        let mut states = vec![SvgpState::prior(z.clone(), &params).unwrap(), optimal_state(&x, &y, z.clone(), &params).unwrap()];
        let mut perturbed = states[1].clone();
        let l = Tensor::randn(m, m, 0.3, &mut rng);
        for i in 0..m {
            perturbed.mean.set(i, 0, perturbed.mean.get(i, 0) + rng.random_range(-0.5..0.5));
            for j in 0..m {
                let extra: f64 = (0..m).map(|k| l.get(i, k) * l.get(j, k)).sum();
                perturbed.cov.set(i, j, perturbed.cov.get(i, j) + extra);
            }
        }
        states.push(perturbed);
        for s in &states {
            worst_excess = worst_excess.max(svgp_elbo(&x, &y, s, &params, n).unwrap() - lml);
        }
        let tight = optimal_state(&x, &y, x.clone(), &params).unwrap();
        let gap = lml - svgp_elbo(&x, &y, &tight, &params, n).unwrap();
        worst_gap = worst_gap.max(gap);
        worst_excess = worst_excess.max(-gap);
        if gap >= 1e-3 {
            wide += 1;
        }
    }
    outcome(
        worst_excess <= 1e-6 && worst_gap < 1e-3,
        format!(
            "max ELBO - LML {worst_excess:.1e} over 400 states; gap at Z = X >= 1e-3 on {wide}/100 problems (max {worst_gap:.1e} nats)"
        ),
    )
}

// 4 ----------------------------------------------------------------------

fn tiny_train() -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig {
            d_embed: 8,
            layers: 1,
            heads: 2,
            d_ff: 16,
            dropout: 0.1,
        },
        epochs_mse: 10,
        epochs_elbo: 4,
        batch_size: 32,
        lr_encoder: 3e-3,
        lr_kernel: 1e-2,
        inducing_points: 16,
        ..TrainConfig::default()
    }
}

fn transfer_invariants() -> Outcome {
    let space = ParamSpace::uniform_box("x", 4, -1.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<Vec<f64>> = (0..100).map(|_| space.sample(&mut rng)).collect();
    let y = rows.iter().map(|r| r[0] * r[1] + r[2].sin() - r[3]).collect();
    let source = pretrain(&[SourceDataset::new("s", space.clone(), rows, y).unwrap()], &tiny_train()).unwrap().0;

    let (copy, report) = build_target_model(&source, &space, 1).unwrap();
    let query: Vec<Vec<f64>> = (0..200).map(|_| space.sample(&mut rng)).collect();
    let identical = report.mixed_names.is_empty() && copy.predict(&space, &query).unwrap() == source.predict(&space, &query).unwrap();

    let mut bad = 0;
    for _ in 0..1000 {
        let a = Tensor::randn(1, 8, 1.0, &mut rng);
        let b = Tensor::randn(1, 8, 1.0, &mut rng);
        let alpha: f64 = rng.random();
        let c = mix(&a, &b, alpha);
        let endpoints = mix(&a, &b, 1.0) == a && mix(&a, &b, 0.0) == b;
        let convex = (0..8).all(|k| {
            let (lo, hi) = (a.data()[k].min(b.data()[k]), a.data()[k].max(b.data()[k]));
            c.data()[k] >= lo - 1e-15 && c.data()[k] <= hi + 1e-15
        });
        let (w, bias, origin) = mixup_embedding(&source.registry, &mut rng);
        let coupled = match origin {
            MixOrigin::Mixup { first, second, alpha } => {
                let (e1, e2) = (&source.registry.numeric[&first], &source.registry.numeric[&second]);
                first != second && (0.0..=1.0).contains(&alpha) && w == mix(&e1.w, &e2.w, alpha) && bias == mix(&e1.b, &e2.b, alpha)
            }
            _ => false,
        };
        if !(endpoints && convex && coupled) {
            bad += 1;
        }
    }
    outcome(
        identical && bad == 0,
        format!("copy-only predictions bit-identical: {identical}; {bad} of 1000 mix-up draws violate endpoints, convexity or coupling"),
    )
}

// 5, 6 -------------------------------------------------------------------

fn desk_ackley(fixed_prefix: bool, methods: Vec<Method>) -> ExperimentResult {
    let cfg = ExperimentConfig {
        problem: Problem::AckleyTransfer {
            source_dim: 8,
            target_dim: 12,
            source_points: 400,
            instance_seed: 0,
            fixed_prefix,
        },
        methods,
        seeds: 5,
        budget: 65,
        n_init: 5,
        jobs: jobs(),
        ..ExperimentConfig::default()
    };
    run_experiment(&cfg).unwrap()
}

fn final_medians(result: &ExperimentResult, methods: &[Method], regret: bool) -> Vec<(Method, f64, usize)> {
    methods
        .iter()
        .map(|&m| {
            let vals = if regret { result.regret_at(m, 65) } else { result.best_at(m, 65) };
            let ok: Vec<f64> = vals.iter().flatten().copied().collect();
            (m, median(&ok), vals.len() - ok.len())
        })
        .collect()
}

fn describe(medians: &[(Method, f64, usize)]) -> String {
    medians
        .iter()
        .map(|(m, v, failed)| {
            let f = if *failed > 0 { format!(" ({failed} failed)") } else { String::new() };
            format!("{} {v:.3}{f}", m.as_str())
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn ackley_ordering() -> Outcome {
    let methods = vec![Method::Gp, Method::Gp50, Method::FtdklCold, Method::FtdklPretrained];
    let result = desk_ackley(false, methods.clone());
    let medians = final_medians(&result, &methods, false);
    let pre = medians[3].1;
    let pass = medians[..3].iter().all(|(_, v, _)| pre < *v) && medians.iter().all(|m| m.2 == 0);
    outcome(pass, format!("median best at evaluation 65: {}", describe(&medians)))
}

fn fixed_prefix_ordering() -> Outcome {
    let methods = vec![Method::Gp, Method::FtdklPretrained];
    let result = desk_ackley(true, methods.clone());
    let medians = final_medians(&result, &methods, true);
    let pass = medians[1].1 < medians[0].1 && medians.iter().all(|m| m.2 == 0);
    outcome(pass, format!("median final regret: {}", describe(&medians)))
}

// 7 ----------------------------------------------------------------------

fn heterogeneous() -> Outcome {
    let problem = Problem::Heterogeneous {
        seed: 0,
        rows_per_source: 500,
    };
    let evaluations = 25;
    let cfg = ExperimentConfig {
        problem: problem.clone(),
        methods: vec![Method::FtdklCold, Method::FtdklPretrained],
        seeds: 5,
        budget: evaluations,
        n_init: 5,
        jobs: jobs(),
        ..ExperimentConfig::default()
    };
    let result = run_experiment(&cfg).unwrap();
    let cold = result.regret_at(Method::FtdklCold, evaluations);
    let pre = result.regret_at(Method::FtdklPretrained, evaluations);
    let wins = cold.iter().zip(&pre).filter(|(c, p)| matches!((c, p), (Some(c), Some(p)) if p < c)).count();
    let fmt = |v: &[Option<f64>]| v.iter().map(|r| r.map_or("failed".into(), |r| format!("{r:.3}"))).collect::<Vec<_>>().join("/");

    let prepared = problem.prepare().unwrap();
    let model = pretrain(&prepared.sources, &cfg.train).unwrap().0;
    let (model, _) = build_target_model(&model, &prepared.space, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let table: Vec<Vec<f64>> = (0..2000).map(|_| prepared.space.sample(&mut rng)).collect();
    let picks = zero_shot_batch(&model, &prepared.space, &table, 10).unwrap();
    let means: Vec<f64> = model.predict(&prepared.space, &table).unwrap().iter().map(|p| p.mean).collect();
    let argmin = (0..means.len()).min_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
    let again = zero_shot_batch(&model, &prepared.space, &table, 10).unwrap();
    let zero_shot_ok = picks[0].index == argmin && picks == again;

    outcome(
        wins >= 4 && zero_shot_ok,
        format!(
            "pretrained beats cold at evaluation {evaluations} in {wins}/5 seeds (regret {} vs {}); zero-shot first pick is the argmin and repeatable: {zero_shot_ok}",
            fmt(&pre),
            fmt(&cold)
        ),
    )
}

// 8 ----------------------------------------------------------------------

fn metrics_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut regret_ok = true;
    for _ in 0..1000 {
        let values: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..8.0)).collect();
        let r = normalized_regret(&values, 0.0, 5.0).unwrap();
        regret_ok &= r.iter().all(|v| (0.0..=1.0).contains(v)) && r.windows(2).all(|w| w[1] <= w[0]);
    }

    let ties = ranks(&[2.0, 1.0, 2.0, 3.0]) == [2.5, 1.0, 2.5, 4.0]
        && ranks(&[1.0, 1.0, 1.0]) == [2.0, 2.0, 2.0]
        && average_rank(&[vec![vec![1.0, 1.0], vec![1.0, 0.5]], vec![vec![0.0, 0.0], vec![2.0, 2.0]]]).unwrap()
            == vec![vec![1.25, 1.5], vec![1.75, 1.5]];

    let mut invariant = true;
    for _ in 0..200 {
        let tasks: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..4).map(|_| (0..10).map(|_| rng.random_range(0..5) as f64).collect()).collect())
            .collect();
        let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
        let scaled: Vec<Vec<Vec<f64>>> = tasks
            .iter()
            .map(|t| t.iter().map(|s| s.iter().map(|v| a * v + b).collect()).collect())
            .collect();
        invariant &= average_rank(&tasks).unwrap() == average_rank(&scaled).unwrap();
    }
    outcome(
        regret_ok && ties && invariant,
        format!("regret clamped and non-increasing: {regret_ok}; tie convention: {ties}; affine rank invariance: {invariant}"),
    )
}

// 9 ----------------------------------------------------------------------

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let space_a = ParamSpace::uniform_box("a", 3, -1.0, 1.0).unwrap();
    let space_b = ParamSpace::uniform_box("a", 2, -1.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (name, space) in [("t1", &space_a), ("t2", &space_b)] {
        let rows: Vec<Vec<f64>> = (0..80).map(|_| space.sample(&mut rng)).collect();
        let y = rows.iter().map(|r| r.iter().map(|v| (v - 0.2).powi(2)).sum()).collect();
        SourceDataset::new(name, space.clone(), rows, y).unwrap().write_csv(&p(&format!("{name}.csv"))).unwrap();
    }
    std::fs::write(p("manifest.toml"), "[[tasks]]\nid = \"t1\"\npath = \"t1.csv\"\n[[tasks]]\nid = \"t2\"\npath = \"t2.csv\"\n").unwrap();
    let mut cfg = CliConfig {
        seed: 11,
        train: tiny_train(),
        acquisition: AcquisitionConfig {
            population: 20,
            generations: 15,
            ..AcquisitionConfig::default()
        },
        ..CliConfig::default()
    };
    cfg.optimize.budget = 15;
    cfg.train.finetune_steps = 5;

    let read = |n: &str| std::fs::read(p(n)).unwrap();
    for out in ["m1.json", "m2.json"] {
        cmd_pretrain(&p("manifest.toml"), &cfg, &p(out), None).unwrap();
    }
    let checkpoints = read("m1.json") == read("m2.json");
    let reloaded = checkpoint_bytes(&ftdkl::surrogate::load_checkpoint(&p("m1.json")).unwrap()).unwrap() == read("m1.json");

    let spec = ProblemSpec::Benchmark("ackley4".into());
    let mut traces = true;
    for (label, ckpt) in [("pre", Some(p("m1.json"))), ("gp", None)] {
        cfg.optimize.surrogate = ColdSurrogate::Gp;
        for run in 0..2 {
            cmd_optimize(&spec, ckpt.as_deref(), &cfg, &p(&format!("{label}{run}.jsonl"))).unwrap();
        }
        traces &= read(&format!("{label}0.jsonl")) == read(&format!("{label}1.jsonl"));
    }
    outcome(
        checkpoints && reloaded && traces,
        format!("checkpoints identical: {checkpoints}; reload round-trips: {reloaded}; traces identical: {traces}"),
    )
}

// ------------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient suite", gradient_suite),
        (2, "exact GP matches dense oracle", exact_gp_oracle),
        (3, "ELBO bounds the log marginal likelihood", elbo_bound),
        (4, "transfer invariants", transfer_invariants),
        (5, "desk Ackley transfer ordering", ackley_ordering),
        (6, "fixed-prefix Ackley ordering", fixed_prefix_ordering),
        (7, "heterogeneous sources and zero-shot ranking", heterogeneous),
        (8, "metric properties", metrics_properties),
        (9, "reproducible pretrain and optimize", reproducibility),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("FTDKL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {id}: {verdict} {name} [{:.1}s] {}", t.elapsed().as_secs_f64(), result.detail);
        if !result.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        if strict {
            std::process::exit(1);
        }
    }
}
