use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Graph, Tensor, Var};
use crate::encoder::registry::{EmbeddingRegistry, TokenBatch};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_embed: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_embed: 128,
            layers: 3,
            heads: 8,
            d_ff: 512,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    /// A small encoder for single-core experiments.
    pub fn desk() -> Self {
        Self {
            d_embed: 16,
            layers: 2,
            heads: 2,
            d_ff: 32,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_embed == 0 || self.layers == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        if self.d_embed % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_embed {} not divisible by heads {}",
                self.d_embed, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Whether dropout is active.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerParams {
    fn new<R: Rng + ?Sized>(c: &EncoderConfig, rng: &mut R) -> Self {
        let e = c.d_embed;
        let f = c.d_ff;
        let se = 1.0 / (e as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        Self {
            ln1_gamma: Tensor::full(1, e, 1.0),
            ln1_beta: Tensor::zeros(1, e),
            wq: Tensor::randn(e, e, se, rng),
            bq: Tensor::zeros(1, e),
            wk: Tensor::randn(e, e, se, rng),
            bk: Tensor::zeros(1, e),
            wv: Tensor::randn(e, e, se, rng),
            bv: Tensor::zeros(1, e),
            wo: Tensor::randn(e, e, se, rng),
            bo: Tensor::zeros(1, e),
            ln2_gamma: Tensor::full(1, e, 1.0),
            ln2_beta: Tensor::zeros(1, e),
            w1: Tensor::randn(e, f, se, rng),
            b1: Tensor::zeros(1, f),
            w2: Tensor::randn(f, e, sf, rng),
            b2: Tensor::zeros(1, e),
        }
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }
}

/// Transformer stack shared by all tasks. Pre-norm blocks, GELU feed-forward,
/// no positional encoding; the output is the final `[CLS]` state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub layers: Vec<LayerParams>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

/// Graph handles of a registered [`EncoderParams`], in `tensors_mut` order.
pub struct EncoderVars {
    vars: Vec<Var>,
}

impl EncoderVars {
    /// Wraps leaves given in [`EncoderParams::tensors`] order.
    pub fn from_leaves(params: &EncoderParams, leaves: &[Var]) -> Result<Self> {
        let expected = params.layers.len() * 16 + 2;
        if leaves.len() != expected {
            return Err(Error::shape(
                "EncoderVars",
                format!("{} leaves for {expected} tensors", leaves.len()),
            ));
        }
        Ok(Self { vars: leaves.to_vec() })
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers).map(|_| LayerParams::new(&config, rng)).collect();
        let e = config.d_embed;
        Ok(Self {
            config,
            layers,
            final_gamma: Tensor::full(1, e, 1.0),
            final_beta: Tensor::zeros(1, e),
        })
    }

    pub fn d_embed(&self) -> usize {
        self.config.d_embed
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.layers.iter().flat_map(|l| l.tensors()).collect();
        out.push(&self.final_gamma);
        out.push(&self.final_beta);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect();
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t.clone()) })
            .collect();
        EncoderVars { vars }
    }

    /// Runs the transformer on a token matrix of `batch` sequences of length
    /// `seq` and returns the `batch x d_e` matrix of final `[CLS]` states.
    /// With `normalization` off, every layer norm is the identity and
    /// dropout is disabled.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &EncoderVars,
        tokens: Var,
        seq: usize,
        mut mode: Mode<'_>,
        normalization: bool,
    ) -> Result<Var> {
        let n = g.value(tokens).rows();
        let batch = n / seq;
        let p = if normalization { self.config.dropout } else { 0.0 };
        let mut x = tokens;
        for l in 0..self.config.layers {
            let v = &vars.vars[l * 16..(l + 1) * 16];
            let h = if normalization { g.layer_norm(x, v[0], v[1]) } else { x };
            let q = linear(g, h, v[2], v[3]);
            let k = linear(g, h, v[4], v[5]);
            let val = linear(g, h, v[6], v[7]);
            let att = g.attention(q, k, val, seq, self.config.heads);
            let proj = linear(g, att, v[8], v[9]);
            let proj = dropout(g, proj, p, &mut mode);
            x = g.add(x, proj);
            let h2 = if normalization { g.layer_norm(x, v[10], v[11]) } else { x };
            let hidden = linear(g, h2, v[12], v[13]);
            let hidden = g.gelu(hidden);
            let hidden = dropout(g, hidden, p, &mut mode);
            let out = linear(g, hidden, v[14], v[15]);
            let out = dropout(g, out, p, &mut mode);
            x = g.add(x, out);
        }
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let mut z = g.select_rows(x, &cls_rows);
        if normalization {
            let nv = vars.vars.len();
            z = g.layer_norm(z, vars.vars[nv - 2], vars.vars[nv - 1]);
        }
        g.check_finite(z, "encoder activations")?;
        Ok(z)
    }

    /// Encodes a batch without recording gradients for parameters.
    pub fn encode(
        &self,
        registry: &EmbeddingRegistry,
        batch: &TokenBatch,
        normalization: bool,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let rv = registry.register(&mut g, false);
        let ev = self.register(&mut g, false);
        let tokens = registry.tokens_in(&mut g, &rv, batch)?;
        let z = self.forward(&mut g, &ev, tokens, batch.names.len() + 1, Mode::Eval, normalization)?;
        Ok(g.value(z).clone())
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

fn dropout(g: &mut Graph, x: Var, p: f64, mode: &mut Mode<'_>) -> Var {
    let Mode::Train(rng) = mode else {
        return x;
    };
    if p <= 0.0 {
        return x;
    }
    let (r, c) = g.value(x).shape();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::new(r, c, mask).expect("sized"));
    g.mul(x, m)
}
