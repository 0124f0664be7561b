use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    check_kinds, normalize_sources, transform_row, FeatureTransform, NormalizerState, ParamKind, ParamSpace,
    SourceDataset,
};
use crate::diffmath::{adamw_step_partial, AdamWConfig, Graph, OptimizerState, Tensor, Var};
use crate::encoder::{EmbeddingRegistry, EncoderParams, Mode, TokenBatch};
use crate::error::{Error, Result};
use crate::gp::{elbo_graph, kmeans, natgrad_update, KernelParams, SvgpState, SvgpVars};
use crate::surrogate::{FtDklModel, Head, Stage, TrainConfig};

/// Per-epoch training curves.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean minibatch squared error per MSE epoch.
    pub mse: Vec<f64>,
    /// Mean per-row ELBO per ELBO epoch.
    pub elbo: Vec<f64>,
}

/// Rows sampled for k-means and kernel initialization.
const INIT_SAMPLE: usize = 2048;
const KMEANS_ITERS: usize = 25;

/// Registry entry for every name across the sources, in first-seen order.
pub fn build_registry<R: Rng + ?Sized>(sources: &[SourceDataset], d_embed: usize, rng: &mut R) -> Result<EmbeddingRegistry> {
    let mut reg = EmbeddingRegistry::new(d_embed, rng);
    for s in sources {
        add_space(&mut reg, &s.space, rng)?;
    }
    Ok(reg)
}

fn add_space<R: Rng + ?Sized>(reg: &mut EmbeddingRegistry, space: &ParamSpace, rng: &mut R) -> Result<()> {
    for p in space.params() {
        match &p.kind {
            ParamKind::Numeric { .. } => reg.add_numeric(&p.name, rng)?,
            ParamKind::Categorical { choices } => reg.add_categorical(&p.name, choices, rng)?,
        }
    }
    Ok(())
}

/// Picks a source with probability proportional to its size, then up to
/// `batch_size` distinct rows of it.
fn sample_batch<R: Rng + ?Sized>(sources: &[SourceDataset], batch_size: usize, rng: &mut R) -> (usize, Vec<usize>) {
    let total: usize = sources.iter().map(SourceDataset::len).sum();
    let mut u = rng.random_range(0..total);
    let mut k = 0;
    while u >= sources[k].len() {
        u -= sources[k].len();
        k += 1;
    }
    let n = sources[k].len();
    let idx = sample(rng, n, batch_size.min(n)).into_vec();
    (k, idx)
}

fn steps_per_epoch(sources: &[SourceDataset], batch_size: usize) -> usize {
    let total: usize = sources.iter().map(SourceDataset::len).sum();
    total.div_ceil(batch_size).max(1)
}

fn check_sources(sources: &[SourceDataset]) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::invalid("no source datasets"));
    }
    if let Some(s) = sources.iter().find(|s| s.is_empty()) {
        return Err(Error::invalid(format!("source `{}` has no rows", s.task_id)));
    }
    check_kinds(sources)
}

fn leaf_grads<'g>(g: &'g Graph, vars: &[Var]) -> Vec<Option<&'g Tensor>> {
    vars.iter().map(|&v| g.try_grad(v)).collect()
}

/// Stage one: joint training of the encoder with a linear output layer on
/// the mean squared error over all (normalized) sources.
pub fn pretrain_mse(
    sources: &[SourceDataset],
    normalizer: NormalizerState,
    cfg: &TrainConfig,
) -> Result<(FtDklModel, Vec<f64>)> {
    cfg.validate()?;
    check_sources(sources)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let e = cfg.encoder.d_embed;
    let mut registry = build_registry(sources, e, &mut rng)?;
    let mut encoder = EncoderParams::new(cfg.encoder.clone(), &mut rng)?;
    let mut w = Tensor::randn(e, 1, 1.0 / (e as f64).sqrt(), &mut rng);
    let mut b = Tensor::scalar(0.0);
    let mut opt = OptimizerState::new(AdamWConfig::new(cfg.lr_encoder, cfg.weight_decay));
    let batches: Vec<TokenBatch> = sources.iter().map(SourceDataset::token_batch).collect();
    let per_epoch = steps_per_epoch(sources, cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs_mse);
    for epoch in 0..cfg.epochs_mse {
        let mut total = 0.0;
        for _ in 0..per_epoch {
            let (k, idx) = sample_batch(sources, cfg.batch_size, &mut rng);
            let batch = batches[k].subset(&idx);
            let y: Vec<f64> = idx.iter().map(|&i| sources[k].y[i]).collect();
            let mut g = Graph::new();
            let rv = registry.register(&mut g, true);
            let ev = encoder.register(&mut g, true);
            let wv = g.param(&w);
            let bv = g.param(&b);
            let tokens = registry.tokens_in(&mut g, &rv, &batch)?;
            let z = encoder.forward(&mut g, &ev, tokens, batch.names.len() + 1, Mode::Train(&mut rng), true)?;
            let pred = g.matmul(z, wv);
            let pred = g.add_row(pred, bv);
            let target = g.constant(Tensor::column(y));
            let diff = g.sub(pred, target);
            let sq = g.square(diff);
            let sum = g.sum(sq);
            let loss = g.scale(sum, 1.0 / idx.len() as f64);
            g.check_finite(loss, "mse loss")?;
            g.backward(loss)?;
            total += g.value(loss).item();

            let mut vars = rv.all();
            vars.extend_from_slice(ev.all());
            vars.push(wv);
            vars.push(bv);
            let grads = leaf_grads(&g, &vars);
            let mut params = registry.tensors_mut();
            params.extend(encoder.tensors_mut());
            params.push(&mut w);
            params.push(&mut b);
            adamw_step_partial(&mut params, &grads, &mut opt)?;
        }
        let mean = total / per_epoch as f64;
        log::debug!("mse epoch {epoch}: {mean:.6}");
        history.push(mean);
    }
    let model = FtDklModel {
        registry,
        encoder,
        head: Head::Linear { w, b },
        normalizer,
    };
    Ok((model, history))
}

/// Median pairwise distance of up to 256 rows, used as the initial
/// Matérn lengthscale.
fn median_distance(z: &Tensor) -> f64 {
    let n = z.rows().min(256);
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            let v: f64 = z
                .row_slice(i)
                .iter()
                .zip(z.row_slice(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if v > 0.0 {
                d.push(v.sqrt());
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// SVGP head from encoder outputs: k-means inducing inputs, median-distance
/// lengthscale, unit Matérn variance and `q(u) = p(u)`.
pub fn init_svgp_head<R: Rng + ?Sized>(
    encodings: &Tensor,
    linear_variance: Option<f64>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Head> {
    let lengthscale = median_distance(encodings);
    let kernel = KernelParams::new(lengthscale, 1.0, linear_variance, cfg.noise_init)?;
    let inducing = kmeans(encodings, cfg.inducing_points, KMEANS_ITERS, rng)?;
    let state = SvgpState::prior(inducing, &kernel)?;
    Ok(Head::Svgp { state, kernel })
}

/// Up to [`INIT_SAMPLE`] rows drawn across sources in proportion to their
/// size, encoded with normalization off.
fn encode_sample<R: Rng + ?Sized>(model: &FtDklModel, sources: &[SourceDataset], rng: &mut R) -> Result<Tensor> {
    let total: usize = sources.iter().map(SourceDataset::len).sum();
    let mut rows = Vec::new();
    for s in sources {
        let take = if total <= INIT_SAMPLE {
            s.len()
        } else {
            ((s.len() * INIT_SAMPLE) as f64 / total as f64).ceil() as usize
        };
        let idx = sample(rng, s.len(), take.min(s.len())).into_vec();
        let z = model.encoder.encode(&model.registry, &s.token_batch().subset(&idx), false)?;
        rows.extend((0..z.rows()).map(|i| z.row_slice(i).to_vec()));
    }
    Tensor::from_rows(&rows)
}

/// Population variance of the linear head weights, rounded up. A zero
/// variance still yields a usable kernel of variance 1.
fn linear_variance_from_head(w: &Tensor) -> f64 {
    let n = w.len() as f64;
    let mean = w.sum() / n;
    let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.ceil().max(1.0)
}

/// Optimizer states for one ELBO training run.
pub struct ElboOptimizer {
    network: OptimizerState,
    gp: OptimizerState,
}

impl ElboOptimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            network: OptimizerState::new(AdamWConfig::new(cfg.lr_encoder, cfg.weight_decay)),
            gp: OptimizerState::new(AdamWConfig::new(cfg.lr_kernel, 0.0)),
        }
    }
}

/// ELBO on a batch for the current parameters, without updating anything.
pub fn model_elbo(model: &FtDklModel, batch: &TokenBatch, y: &[f64], total_n: usize) -> Result<f64> {
    let Head::Svgp { state, kernel } = &model.head else {
        return Err(Error::invalid("ELBO needs a model with a GP head"));
    };
    let z = model.encode(batch)?;
    crate::gp::svgp_elbo(&z, y, state, kernel, total_n)
}

/// One joint update: AdamW on the network, kernel and inducing inputs, and
/// a natural-gradient step on `q(u)`. Returns the ELBO before the update.
pub fn elbo_step(
    model: &mut FtDklModel,
    batch: &TokenBatch,
    y: &[f64],
    total_n: usize,
    cfg: &TrainConfig,
    opt: &mut ElboOptimizer,
) -> Result<f64> {
    let Head::Svgp { state, kernel } = &mut model.head else {
        return Err(Error::invalid("ELBO training needs a model with a GP head"));
    };
    let mut g = Graph::new();
    let rv = model.registry.register(&mut g, true);
    let ev = model.encoder.register(&mut g, true);
    let kv = kernel.register(&mut g, true);
    let sv: SvgpVars = state.register(&mut g, true, false)?;
    let tokens = model.registry.tokens_in(&mut g, &rv, batch)?;
    let x = model
        .encoder
        .forward(&mut g, &ev, tokens, batch.names.len() + 1, Mode::Eval, false)?;
    let elbo = elbo_graph(&mut g, x, y, &sv, &kv, total_n)?;
    let loss = g.scale(elbo, -1.0 / total_n as f64);
    g.backward(loss)?;
    let value = g.value(elbo).item();

    natgrad_update(g.value(x), y, state, kernel, total_n, cfg.natgrad_step)?;

    let mut net_vars = rv.all();
    net_vars.extend_from_slice(ev.all());
    let net_grads = leaf_grads(&g, &net_vars);
    let mut net_params = model.registry.tensors_mut();
    net_params.extend(model.encoder.tensors_mut());
    adamw_step_partial(&mut net_params, &net_grads, &mut opt.network)?;

    let mut gp_vars = kv.all().to_vec();
    gp_vars.push(sv.inducing);
    let gp_grads = leaf_grads(&g, &gp_vars);
    let mut gp_params = kernel.tensors_mut();
    gp_params.push(&mut state.inducing);
    adamw_step_partial(&mut gp_params, &gp_grads, &mut opt.gp)?;
    Ok(value)
}

/// Stage two: replaces the linear head by an SVGP head and trains
/// everything on the ELBO with layer norm and dropout disabled.
pub fn pretrain_elbo(model: &FtDklModel, sources: &[SourceDataset], cfg: &TrainConfig) -> Result<(FtDklModel, Vec<f64>)> {
    cfg.validate()?;
    check_sources(sources)?;
    let Head::Linear { w, .. } = &model.head else {
        return Err(Error::invalid("the ELBO stage starts from an MSE-stage model"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let linear_variance = linear_variance_from_head(w);
    let enc = encode_sample(model, sources, &mut rng)?;
    let mut out = model.clone();
    out.head = init_svgp_head(&enc, Some(linear_variance), cfg, &mut rng)?;

    let total_n: usize = sources.iter().map(SourceDataset::len).sum();
    let batches: Vec<TokenBatch> = sources.iter().map(SourceDataset::token_batch).collect();
    let per_epoch = steps_per_epoch(sources, cfg.batch_size);
    let mut opt = ElboOptimizer::new(cfg);
    let mut history = Vec::with_capacity(cfg.epochs_elbo);
    for epoch in 0..cfg.epochs_elbo {
        let mut total = 0.0;
        for _ in 0..per_epoch {
            let (k, idx) = sample_batch(sources, cfg.batch_size, &mut rng);
            let batch = batches[k].subset(&idx);
            let y: Vec<f64> = idx.iter().map(|&i| sources[k].y[i]).collect();
            total += elbo_step(&mut out, &batch, &y, total_n, cfg, &mut opt)? / total_n as f64;
        }
        let mean = total / per_epoch as f64;
        log::debug!("elbo epoch {epoch}: {mean:.6}");
        history.push(mean);
    }
    Ok((out, history))
}

/// Normalizes raw sources and runs both pre-training stages.
pub fn pretrain(sources: &[SourceDataset], cfg: &TrainConfig) -> Result<(FtDklModel, TrainHistory)> {
    cfg.validate()?;
    check_sources(sources)?;
    let (norm, state) = normalize_sources(sources, cfg.scaling)?;
    let (mse_model, mse) = pretrain_mse(&norm, state, cfg)?;
    let (model, elbo) = pretrain_elbo(&mse_model, &norm, cfg)?;
    Ok((model, TrainHistory { mse, elbo }))
}

/// Outcome of [`finetune`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub steps: usize,
    pub elbo_before: f64,
    pub elbo_after: f64,
}

/// Full-batch ELBO fine-tuning on target rows given in model input units and
/// normalized objectives.
pub fn finetune(model: &mut FtDklModel, batch: &TokenBatch, y: &[f64], steps: usize, cfg: &TrainConfig) -> Result<FinetuneReport> {
    if y.is_empty() || batch.len() != y.len() {
        return Err(Error::invalid("fine-tuning needs at least one target observation"));
    }
    if model.stage() != Stage::Elbo {
        return Err(Error::invalid("fine-tuning needs a model with a GP head"));
    }
    let n = y.len();
    let elbo_before = model_elbo(model, batch, y, n)?;
    let cfg = TrainConfig {
        lr_encoder: cfg.finetune_lr_encoder,
        lr_kernel: cfg.finetune_lr_kernel,
        ..cfg.clone()
    };
    let mut opt = ElboOptimizer::new(&cfg);
    for _ in 0..steps {
        elbo_step(model, batch, y, n, &cfg, &mut opt)?;
    }
    let elbo_after = if steps == 0 { elbo_before } else { model_elbo(model, batch, y, n)? };
    Ok(FinetuneReport {
        steps,
        elbo_before,
        elbo_after,
    })
}

/// Number of random points whose encodings seed a cold model's GP head.
pub const COLD_INIT_POINTS: usize = 512;

/// Untrained FT-DKL for `space`: random embeddings and encoder, inputs
/// mapped from the box to `[-1, 1]`, SVGP head initialized on encodings of
/// random points.
pub fn cold_model<R: Rng + ?Sized>(space: &ParamSpace, cfg: &TrainConfig, rng: &mut R) -> Result<FtDklModel> {
    cfg.validate()?;
    if space.is_empty() {
        return Err(Error::invalid("empty search space"));
    }
    let mut registry = EmbeddingRegistry::new(cfg.encoder.d_embed, rng);
    add_space(&mut registry, space, rng)?;
    let encoder = EncoderParams::new(cfg.encoder.clone(), rng)?;
    let features: BTreeMap<String, FeatureTransform> = space
        .params()
        .iter()
        .filter_map(|p| match p.kind {
            ParamKind::Numeric { lo, hi, .. } => Some((p.name.clone(), FeatureTransform::Affine { lo, hi })),
            ParamKind::Categorical { .. } => None,
        })
        .collect();
    let normalizer = NormalizerState {
        scaling: cfg.scaling,
        features,
        objectives: BTreeMap::new(),
    };
    let tr = normalizer.input_transforms(space);
    let rows = (0..COLD_INIT_POINTS).map(|_| transform_row(&tr, &space.sample(rng))).collect();
    let z = encoder.encode(&registry, &TokenBatch::new(space.names(), rows)?, false)?;
    let head = init_svgp_head(&z, Some(1.0), cfg, rng)?;
    Ok(FtDklModel {
        registry,
        encoder,
        head,
        normalizer,
    })
}
