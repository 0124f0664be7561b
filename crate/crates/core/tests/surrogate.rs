use ftdkl::data::{normalize_sources, FeatureScaling, Param, ParamSpace, SourceDataset};
use ftdkl::diffmath::Graph;
use ftdkl::encoder::{EncoderConfig, Mode, TokenBatch};
use ftdkl::gp::svgp_predict;
use ftdkl::surrogate::{
    build_registry, cold_model, finetune, load_checkpoint, model_elbo, pretrain, pretrain_elbo, pretrain_mse,
    save_checkpoint, Head, Stage, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig {
            d_embed: 8,
            layers: 1,
            heads: 2,
            d_ff: 16,
            dropout: 0.1,
        },
        epochs_mse: 20,
        epochs_elbo: 10,
        batch_size: 32,
        lr_encoder: 3e-3,
        lr_kernel: 1e-2,
        inducing_points: 16,
        ..TrainConfig::default()
    }
}

fn source(id: &str, names: &[&str], n: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> SourceDataset {
    let space = ParamSpace::new(names.iter().map(|s| Param::numeric(*s, -1.0, 1.0)).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| space.sample(&mut rng)).collect();
    let y = rows.iter().map(|r| f(r)).collect();
    SourceDataset::new(id, space, rows, y).unwrap()
}

fn smooth(r: &[f64]) -> f64 {
    (2.0 * r[0]).sin() + 0.5 * r[0] * r[0]
}

#[test]
fn constant_target_is_fit() {
    let s = source("a", &["x"], 64, 1, |_| 0.0);
    let (norm, st) = normalize_sources(&[s], FeatureScaling::Standard).unwrap();
    let cfg = TrainConfig { epochs_mse: 300, ..tiny() };
    let (_, hist) = pretrain_mse(&norm, st, &cfg).unwrap();
    let best = hist.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(best < 1e-4, "best epoch loss {best}");
}

#[test]
fn disjoint_sources_update_their_own_embeddings() {
    let a = source("a", &["p", "q"], 40, 2, |r| r[0] + r[1]);
    let b = source("b", &["r"], 40, 3, |r| r[0] * r[0]);
    let sources = [a, b];
    let cfg = TrainConfig { epochs_mse: 2, ..tiny() };
    let initial = build_registry(&sources, cfg.encoder.d_embed, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let (norm, st) = normalize_sources(&sources, FeatureScaling::Standard).unwrap();
    let (model, _) = pretrain_mse(&norm, st, &cfg).unwrap();
    for name in ["p", "q", "r"] {
        assert_ne!(model.registry.numeric[name], initial.numeric[name], "{name} untouched");
    }

    // In a single step, only the batch's own names receive gradients.
    let mut g = Graph::new();
    let rv = model.registry.register(&mut g, true);
    let ev = model.encoder.register(&mut g, true);
    let batch = TokenBatch::new(vec!["p".into(), "q".into()], vec![vec![0.1, 0.2], vec![-0.3, 0.4]]).unwrap();
    let tokens = model.registry.tokens_in(&mut g, &rv, &batch).unwrap();
    let z = model.encoder.forward(&mut g, &ev, tokens, 3, Mode::Eval, true).unwrap();
    let loss = g.sum(z);
    g.backward(loss).unwrap();
    let (rw, rb) = rv.numeric["r"];
    assert!(g.try_grad(rw).is_none() && g.try_grad(rb).is_none());
    assert!(g.grad(rv.numeric["p"].0).sq_norm() > 0.0);
    assert!(ev.all().iter().any(|&v| g.grad(v).sq_norm() > 0.0));
}

#[test]
fn shared_name_transfers_between_sources() {
    let f = |r: &[f64]| (3.0 * r[0]).sin();
    let a = source("a", &["lr"], 24, 4, f);
    let b = source("b", &["lr", "other"], 200, 5, f);
    let held = source("h", &["lr"], 200, 6, f);
    let cfg = TrainConfig { epochs_mse: 40, ..tiny() };
    let mse = |sources: &[SourceDataset]| {
        let (norm, st) = normalize_sources(sources, FeatureScaling::Standard).unwrap();
        let (model, _) = pretrain_mse(&norm, st, &cfg).unwrap();
        let tr = model.input_transforms(&held.space).unwrap();
        let stats = model.normalizer.objectives["a"];
        let pred = model.predict(&held.space, &held.rows).unwrap();
        let _ = tr;
        pred.iter()
            .zip(&held.y)
            .map(|(p, y)| (stats.denormalize(p.mean) - y).powi(2))
            .sum::<f64>()
            / held.len() as f64
    };
    let alone = mse(&[a.clone()]);
    let joint = mse(&[a, b]);
    assert!(joint < alone, "joint {joint} alone {alone}");
}

fn pretrained(seed: u64) -> (ftdkl::surrogate::FtDklModel, Vec<SourceDataset>) {
    let s = source("a", &["x"], 96, seed, smooth);
    let cfg = TrainConfig { seed, ..tiny() };
    let (norm, st) = normalize_sources(&[s], FeatureScaling::Standard).unwrap();
    let (m, _) = pretrain_mse(&norm, st, &cfg).unwrap();
    let (m, _) = pretrain_elbo(&m, &norm, &cfg).unwrap();
    (m, norm)
}

#[test]
fn elbo_stage_improves_and_keeps_encoder() {
    let s = source("a", &["x"], 96, 7, smooth);
    let cfg = tiny();
    let (norm, st) = normalize_sources(&[s], FeatureScaling::Standard).unwrap();
    let (mse_model, _) = pretrain_mse(&norm, st, &cfg).unwrap();
    let (elbo_model, hist) = pretrain_elbo(&mse_model, &norm, &cfg).unwrap();
    assert_eq!(elbo_model.stage(), Stage::Elbo);
    assert!(hist[9] > hist[0], "{hist:?}");

    // Swapping the head alone leaves the encoder untouched.
    let zero_epochs = TrainConfig { epochs_elbo: 0, ..cfg.clone() };
    let (swapped, _) = pretrain_elbo(&mse_model, &norm, &zero_epochs).unwrap();
    let batch = norm[0].token_batch();
    let before = mse_model.encoder.encode(&mse_model.registry, &batch, false).unwrap();
    assert_eq!(swapped.encode(&batch).unwrap(), before);

    let preds = elbo_model.predict(&norm[0].space, &norm[0].rows).unwrap();
    assert!(preds.iter().all(|p| p.std > 0.0));
}

#[test]
fn prediction_contracts() {
    let (m, norm) = pretrained(8);
    let batch = norm[0].token_batch();
    let a = m.predict_tokens(&batch).unwrap();
    assert_eq!(a, m.predict_tokens(&batch).unwrap());
    let Head::Svgp { state, kernel } = &m.head else { panic!() };
    let z = m.encode(&batch).unwrap();
    let manual = svgp_predict(&z, state, kernel).unwrap();
    for (p, q) in a.iter().zip(&manual) {
        assert!((p.mean - q.mean).abs() < 1e-12 && (p.std - q.std).abs() < 1e-12);
    }

    let s = source("a", &["x"], 32, 9, smooth);
    let (norm, st) = normalize_sources(&[s], FeatureScaling::Standard).unwrap();
    let (mse_model, _) = pretrain_mse(&norm, st, &TrainConfig { epochs_mse: 2, ..tiny() }).unwrap();
    assert!(mse_model.predict_tokens(&norm[0].token_batch()).unwrap().iter().all(|p| p.std == 0.0));
    assert!(mse_model.predict(&ParamSpace::uniform_box("z", 1, 0.0, 1.0).unwrap(), &[vec![0.5]]).is_err());
}

#[test]
fn finetune_contracts() {
    let (m, _) = pretrained(10);
    let cfg = tiny();
    let space = ParamSpace::new(vec![Param::numeric("x", -1.0, 1.0)]).unwrap();
    let tr = m.input_transforms(&space).unwrap();
    let target = |x: f64| smooth(&[x]) + 0.3;
    let mut improved = 0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let xs: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = xs.iter().map(|&x| target(x)).collect();
        let stats = ftdkl::data::ObjectiveStats::fit(&y).unwrap();
        let yn = stats.normalize_all(&y);
        let batch = TokenBatch::new(vec!["x".into()], xs.iter().map(|&x| vec![tr[0].apply(x)]).collect()).unwrap();
        let rmse = |model: &ftdkl::surrogate::FtDklModel| {
            let p = model.predict_tokens(&batch).unwrap();
            (p.iter().zip(&yn).map(|(p, y)| (p.mean - y).powi(2)).sum::<f64>() / 5.0).sqrt()
        };
        let mut tuned = m.clone();
        let report = finetune(&mut tuned, &batch, &yn, cfg.finetune_steps, &cfg).unwrap();
        assert!(report.elbo_after.is_finite());
        if rmse(&tuned) <= rmse(&m) {
            improved += 1;
        }
        let mut same = m.clone();
        finetune(&mut same, &batch, &yn, 0, &cfg).unwrap();
        assert_eq!(same, m);

        // The ELBO grows linearly in the number of copies of the data.
        let copies = |k: usize| {
            let rows: Vec<Vec<f64>> = (0..k).flat_map(|_| batch.values.clone()).collect();
            let ys: Vec<f64> = (0..k).flat_map(|_| yn.clone()).collect();
            let b = TokenBatch::new(batch.names.clone(), rows).unwrap();
            model_elbo(&m, &b, &ys, ys.len()).unwrap()
        };
        let (e1, e2, e3) = (copies(1), copies(2), copies(3));
        assert!((e3 - 2.0 * e2 + e1).abs() < 1e-8 * e3.abs().max(1.0));
    }
    assert!(improved >= 4, "improved in {improved}/5 seeds");
    assert!(finetune(&mut m.clone(), &TokenBatch::new(vec!["x".into()], vec![]).unwrap(), &[], 3, &cfg).is_err());
}

#[test]
fn checkpoints_and_training_are_reproducible() {
    let s = source("a", &["x", "w"], 64, 11, |r| r[0] - r[1]);
    let cfg = TrainConfig { epochs_mse: 3, epochs_elbo: 2, ..tiny() };
    let (m1, h1) = pretrain(&[s.clone()], &cfg).unwrap();
    let (m2, h2) = pretrain(&[s.clone()], &cfg).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(h1, h2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&m1, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m1);
    let q = vec![vec![0.25, -0.5], vec![0.9, 0.1]];
    assert_eq!(back.predict(&s.space, &q).unwrap(), m1.predict(&s.space, &q).unwrap());

    let text = std::fs::read_to_string(&path).unwrap().replacen("\"1.0\"", "\"2.0\"", 1);
    std::fs::write(&path, text).unwrap();
    assert!(load_checkpoint(&path).unwrap_err().is_invalid_input());
}

#[test]
fn cold_model_predicts_prior_like_values() {
    let space = ParamSpace::uniform_box("x", 3, -1.0, 1.0).unwrap();
    let m = cold_model(&space, &tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Vec<f64>> = (0..10).map(|_| space.sample(&mut rng)).collect();
    let p = m.predict(&space, &rows).unwrap();
    assert!(p.iter().all(|p| p.mean.abs() < 1e-9 && p.std > 0.0));
}
