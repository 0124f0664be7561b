//! Finite-difference checks for every differentiable building block.

use ftdkl::diffmath::{finite_difference, relative_error, Graph, Tensor, Var};
use ftdkl::encoder::{EmbeddingRegistry, EncoderConfig, EncoderParams, EncoderVars, Mode, RegistryVars, TokenBatch};
use ftdkl::gp::{elbo_graph, exact_lml_graph, KernelVars, SvgpVars};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const POINTS: u64 = 10;
/// Gradient norm below which the error is measured in absolute terms.
/// Some gradients vanish identically (attention key biases cancel in the
/// softmax), and their difference quotients are pure rounding noise.
pub const GRAD_FLOOR: f64 = 1e-4;

type Build<'a> = Box<dyn Fn(&mut Graph, &[Var]) -> Var + 'a>;

/// Evaluates `sum(weights * build(params))`, where `weights` is a fixed
/// random projection that turns any output into a scalar.
fn projected(build: &Build<'_>, params: &[Tensor], trainable: bool, weights: &mut Option<Tensor>, seed: u64) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|t| if trainable { g.param(t) } else { g.constant(t.clone()) })
        .collect();
    let out = build(&mut g, &vars);
    let w = weights.get_or_insert_with(|| {
        let (r, c) = g.value(out).shape();
        Tensor::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed))
    });
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv);
    let loss = g.sum(prod);
    (g, vars, loss)
}

/// Worst relative error between analytic and central-difference gradients
/// over all parameters of one configuration.
pub fn check(params: &[Tensor], build: &Build<'_>, seed: u64) -> f64 {
    let mut weights = None;
    let (mut g, vars, loss) = projected(build, params, true, &mut weights, seed);
    g.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v);
        let numeric = finite_difference(&params[i], STEP, |p| {
            let mut probe = params.to_vec();
            probe[i] = p.clone();
            let (g2, _, l2) = projected(build, &probe, false, &mut weights, seed);
            g2.value(l2).item()
        });
        worst = worst.max(relative_error(&analytic, &numeric, GRAD_FLOOR));
    }
    worst
}

fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::randn(r, c, 1.0, rng).map(|v| v.abs() + 0.5)
}

fn spd_factor(g: &mut Graph, b: Var) -> Var {
    let n = g.value(b).rows();
    let bt = g.transpose(b);
    let a = g.matmul(b, bt);
    let a = g.add_const(a, &Tensor::identity(n).map(|v| 2.0 * v));
    g.cholesky(a).expect("spd")
}

struct Case {
    name: &'static str,
    sample: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>,
    build: Build<'static>,
}

fn case(
    name: &'static str,
    sample: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Graph, &[Var]) -> Var + 'static,
) -> Case {
    Case {
        name,
        sample: Box::new(sample),
        build: Box::new(build),
    }
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::randn(r, c, 1.0, rng)
}

fn registry_and_encoder(seed: u64, cfg: EncoderConfig) -> (EmbeddingRegistry, EncoderParams, TokenBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = EmbeddingRegistry::new(cfg.d_embed, &mut rng);
    reg.add_numeric("lr", &mut rng).unwrap();
    reg.add_numeric("depth", &mut rng).unwrap();
    reg.add_categorical("kind", &["a".into(), "b".into(), "c".into()], &mut rng)
        .unwrap();
    let enc = EncoderParams::new(cfg, &mut rng).unwrap();
    let rows = (0..3)
        .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(0..3) as f64, rng.random_range(-1.0..1.0)])
        .collect();
    let batch = TokenBatch::new(vec!["lr".into(), "kind".into(), "depth".into()], rows).unwrap();
    (reg, enc, batch)
}

fn encoder_case(name: &'static str, normalization: bool, train: bool) -> Vec<(String, f64)> {
    let cfg = EncoderConfig {
        d_embed: 4,
        layers: 2,
        heads: 2,
        d_ff: 6,
        dropout: 0.2,
    };
    let mut out = Vec::new();
    for seed in 0..POINTS {
        let (reg, enc, batch) = registry_and_encoder(seed, cfg.clone());
        let mut params: Vec<Tensor> = reg.tensors().into_iter().cloned().collect();
        let n_reg = params.len();
        params.extend(enc.tensors().into_iter().cloned());
        let build: Build<'static> = Box::new(move |g: &mut Graph, vars: &[Var]| {
            let rv = RegistryVars::from_leaves(&reg, &vars[..n_reg]).unwrap();
            let ev = EncoderVars::from_leaves(&enc, &vars[n_reg..]).unwrap();
            let tokens = reg.tokens_in(g, &rv, &batch).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let mode = if train { Mode::Train(&mut rng) } else { Mode::Eval };
            enc.forward(g, &ev, tokens, batch.names.len() + 1, mode, normalization).unwrap()
        });
        out.push((name.to_string(), check(&params, &build, seed)));
    }
    out
}

/// Runs every check and returns `(name, worst relative error)` per
/// configuration.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let cases = vec![
        case("matmul", |r| vec![randn(r, 3, 4), randn(r, 4, 2)], |g, v| g.matmul(v[0], v[1])),
        case("transpose", |r| vec![randn(r, 3, 2)], |g, v| g.transpose(v[0])),
        case("add", |r| vec![randn(r, 2, 3), randn(r, 2, 3)], |g, v| g.add(v[0], v[1])),
        case("sub", |r| vec![randn(r, 2, 3), randn(r, 2, 3)], |g, v| g.sub(v[0], v[1])),
        case("mul", |r| vec![randn(r, 2, 3), randn(r, 2, 3)], |g, v| g.mul(v[0], v[1])),
        case("add_row", |r| vec![randn(r, 3, 2), randn(r, 1, 2)], |g, v| g.add_row(v[0], v[1])),
        case("scale", |r| vec![randn(r, 2, 2)], |g, v| g.scale(v[0], -1.7)),
        case("add_const", |r| vec![randn(r, 2, 2)], |g, v| g.add_const(v[0], &Tensor::full(2, 2, 0.3))),
        case("mul_scalar", |r| vec![randn(r, 2, 3), randn(r, 1, 1)], |g, v| g.mul_scalar(v[0], v[1])),
        case("add_scalar", |r| vec![randn(r, 2, 3), randn(r, 1, 1)], |g, v| g.add_scalar(v[0], v[1])),
        case("exp", |r| vec![randn(r, 2, 3)], |g, v| g.exp(v[0])),
        case("ln", |r| vec![positive(r, 2, 3)], |g, v| g.ln(v[0])),
        case("sqrt", |r| vec![positive(r, 2, 3)], |g, v| g.sqrt(v[0])),
        case("square", |r| vec![randn(r, 2, 3)], |g, v| g.square(v[0])),
        case("recip", |r| vec![positive(r, 2, 3)], |g, v| g.recip(v[0])),
        case("softplus", |r| vec![randn(r, 2, 3).map(|x| 3.0 * x)], |g, v| g.softplus(v[0])),
        case("gelu", |r| vec![randn(r, 2, 3).map(|x| 2.0 * x)], |g, v| g.gelu(v[0])),
        case("sum", |r| vec![randn(r, 2, 3)], |g, v| g.sum(v[0])),
        case("row_sums", |r| vec![randn(r, 2, 3)], |g, v| g.row_sums(v[0])),
        case("col_sums", |r| vec![randn(r, 2, 3)], |g, v| g.col_sums(v[0])),
        case("diag", |r| vec![randn(r, 3, 3)], |g, v| g.diag(v[0])),
        case("concat_rows", |r| vec![randn(r, 1, 3), randn(r, 2, 3)], |g, v| g.concat_rows(&[v[0], v[1], v[0]])),
        case("select_rows", |r| vec![randn(r, 4, 2)], |g, v| g.select_rows(v[0], &[2, 0, 2])),
        case(
            "layer_norm",
            |r| vec![randn(r, 3, 5), randn(r, 1, 5), randn(r, 1, 5)],
            |g, v| g.layer_norm(v[0], v[1], v[2]),
        ),
        case(
            "attention",
            |r| vec![randn(r, 6, 4), randn(r, 6, 4), randn(r, 6, 4)],
            |g, v| g.attention(v[0], v[1], v[2], 3, 2),
        ),
        case(
            "tokenize",
            |r| vec![randn(r, 3, 4), randn(r, 2, 4), randn(r, 1, 4)],
            |g, v| {
                let coef = Tensor::new(2, 2, vec![0.5, 1.0, -1.2, 1.0]).unwrap();
                g.tokenize(coef, vec![0, 2, 1, 2], v[0], v[1], v[2])
            },
        ),
        case("sq_dist", |r| vec![randn(r, 3, 2), randn(r, 4, 2)], |g, v| g.sq_dist(v[0], v[1])),
        case(
            "matern32",
            |r| vec![randn(r, 3, 2), randn(r, 4, 2), positive(r, 1, 1), positive(r, 1, 1)],
            |g, v| {
                let d2 = g.sq_dist(v[0], v[1]);
                g.matern32(d2, v[2], v[3])
            },
        ),
        case("cholesky", |r| vec![randn(r, 4, 4)], |g, v| spd_factor(g, v[0])),
        case(
            "solve_lower",
            |r| vec![randn(r, 3, 3), randn(r, 3, 2)],
            |g, v| {
                let l = spd_factor(g, v[0]);
                g.solve_lower(l, v[1])
            },
        ),
        case(
            "mlp3",
            |r| {
                vec![
                    randn(r, 4, 3),
                    randn(r, 3, 5),
                    randn(r, 1, 5),
                    randn(r, 5, 5),
                    randn(r, 1, 5),
                    randn(r, 5, 1),
                    randn(r, 1, 1),
                ]
            },
            |g, v| {
                let h = g.matmul(v[0], v[1]);
                let h = g.add_row(h, v[2]);
                let h = g.gelu(h);
                let h = g.matmul(h, v[3]);
                let h = g.add_row(h, v[4]);
                let h = g.softplus(h);
                let h = g.matmul(h, v[5]);
                g.add_row(h, v[6])
            },
        ),
        case(
            "kernel",
            |r| vec![randn(r, 4, 3), randn(r, 3, 3), randn(r, 1, 1), randn(r, 1, 1), randn(r, 1, 1)],
            |g, v| {
                let kv = kernel_on(g, &v[2..5]);
                let k = kv.gram(g, v[0], v[1]);
                let d = kv.diag(g, v[0]);
                let kt = g.transpose(k);
                let dt = g.transpose(d);
                g.concat_rows(&[kt, dt])
            },
        ),
        case(
            "exact_lml",
            |r| vec![randn(r, 5, 2), randn(r, 1, 1), randn(r, 1, 1), randn(r, 1, 1), randn(r, 1, 1)],
            |g, v| {
                let kv = kernel_on(g, &v[1..5]);
                let y = [0.3, -1.0, 0.5, 1.2, -0.1];
                exact_lml_graph(g, v[0], &y, &kv).unwrap()
            },
        ),
        case(
            "elbo",
            |r| {
                let z = randn(r, 3, 2);
                let mut ls = randn(r, 3, 3).map(|x| 0.3 * x);
                for i in 0..3 {
                    ls.set(i, i, ls.get(i, i).abs() + 0.5);
                    for j in i + 1..3 {
                        ls.set(i, j, 0.0);
                    }
                }
                vec![
                    randn(r, 5, 2),
                    z,
                    randn(r, 3, 1),
                    ls,
                    randn(r, 1, 1),
                    randn(r, 1, 1),
                    randn(r, 1, 1),
                    randn(r, 1, 1),
                ]
            },
            |g, v| {
                let kv = kernel_on(g, &v[4..8]);
                let sv = SvgpVars {
                    inducing: v[1],
                    mean: v[2],
                    cov_chol: v[3],
                };
                let y = [0.3, -1.0, 0.5, 1.2, -0.1];
                elbo_graph(g, v[0], &y, &sv, &kv, 40).unwrap()
            },
        ),
    ];
    let mut out = Vec::new();
    for c in &cases {
        for seed in 0..POINTS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + c.name.len() as u64);
            let params = (c.sample)(&mut rng);
            out.push((c.name.to_string(), check(&params, &c.build, seed)));
        }
    }
    out.extend(encoder_case("encoder", true, false));
    out.extend(encoder_case("encoder_no_norm", false, false));
    out.extend(encoder_case("encoder_dropout", true, true));
    out
}

fn kernel_on(g: &mut Graph, raw: &[Var]) -> KernelVars {
    KernelVars::from_raw(g, raw).unwrap()
}
