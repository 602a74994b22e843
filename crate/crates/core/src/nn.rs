//! Transformer building blocks and the probabilistic feed-forward layer.
//!
//! Activations are `[B, S, D]`. Every sublayer is post-norm: the block adds
//! the sublayer output to its input and layer-normalizes the sum. Dropout hits
//! attention weights, embeddings and the attention / feed-forward outputs
//! before the residual add; the prob sublayer is never dropped out.

use rand_distr::{Distribution, StandardNormal};

use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::{Graph, Result, Scalar, TensorError, Var};

const LN_EPS: f64 = 1e-5;

/// Dropout rate plus the stream that draws its masks. Without a stream
/// dropout is inactive (evaluation mode).
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut StreamRng>,
}

impl<'a> DropoutCtx<'a> {
    pub fn active(rate: f64, rng: &'a mut StreamRng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn inactive() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn apply<F: Scalar>(&mut self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` init, or all zeros for the last linear of a sublayer.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        zero: bool,
    ) -> Self {
        let init = if zero { Init::Zeros } else { Init::Uniform(1.0 / (in_dim as f64).sqrt()) };
        let w = store.add(&format!("{name}.weight"), &[in_dim, out_dim], init);
        let b = store.add(&format!("{name}.bias"), &[out_dim], init);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p[self.w])?;
        g.add(h, p[self.b])
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), &[dim], Init::Ones);
        let beta = store.add(&format!("{name}.beta"), &[dim], Init::Zeros);
        Self { gamma, beta }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

pub struct Embedding {
    table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, vocab: usize, dim: usize) -> Self {
        let table = store.add(&format!("{name}.table"), &[vocab, dim], Init::Normal(1.0));
        Self { table, vocab, dim }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        ids: &[usize],
        prefix: &[usize],
    ) -> Result<Var> {
        g.embedding(p[self.table], ids, prefix)
    }
}

/// Fixed sinusoidal table `[len, dim]`.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * dim];
    for pos in 0..len {
        for i in (0..dim).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / dim as f64);
            pe[pos * dim + i] = angle.sin();
            if i + 1 < dim {
                pe[pos * dim + i + 1] = angle.cos();
            }
        }
    }
    pe
}

/// Unmasked multi-head scaled dot-product self-attention.
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d_model: usize, heads: usize) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "d_model must be divisible by heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, false),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, false),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, false),
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, true),
            heads,
        }
    }

    pub fn output_proj(&self) -> &Linear {
        &self.out
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: Var,
        drop: &mut DropoutCtx,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let [b, s, d] = shape[..] else {
            return Err(TensorError::Shape { op: "attention", lhs: shape, rhs: vec![] });
        };
        let (h, dh) = (self.heads, d / self.heads);
        let split = |g: &mut Graph<F>, lin: &Linear| -> Result<Var> {
            let t = lin.forward(g, p, x)?;
            let t = g.reshape(t, &[b, s, h, dh])?;
            g.permute(t, &[0, 2, 1, 3])
        };
        let q = split(g, &self.q)?;
        let k = split(g, &self.k)?;
        let v = split(g, &self.v)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, F::of(1.0 / (dh as f64).sqrt()));
        let weights = g.softmax(scores, 3)?;
        let weights = drop.apply(g, weights)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, s, d])?;
        self.out.forward(g, p, ctx)
    }
}

/// Position-wise `Linear -> SiLU -> Linear`.
pub struct FeedForward {
    hidden: Linear,
    out: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d_model: usize, d_ff: usize) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_model, d_ff, false),
            out: Linear::new(store, &format!("{name}.out"), d_ff, d_model, true),
        }
    }

    pub fn output_proj(&self) -> &Linear {
        &self.out
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.silu(h);
        self.out.forward(g, p, h)
    }
}

/// Diagonal Gaussian over the latent, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct GaussianLatent {
    pub mu: Var,
    pub log_var: Var,
}

/// Where a prob layer takes its latent from.
pub enum ZSource<'a> {
    /// Mean inference: `z = mu`.
    Mean,
    /// Sample inference: `z = mu + sigma * eps`, `eps ~ N(0, I)` from the stream.
    Sample(&'a mut StreamRng),
    /// Training: `z` comes from the posterior model.
    Injected(Var),
}

pub struct ProbOutput {
    pub y: Var,
    pub latent: GaussianLatent,
    pub z: Var,
}

/// Probabilistic feed-forward layer: hidden state -> Gaussian latent -> model width.
pub struct ProbLayer {
    input: Linear,
    mu: Linear,
    log_var: Linear,
    out: Linear,
    pub d_z: usize,
}

impl ProbLayer {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d_model: usize, d_z: usize) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.in"), d_model, d_z, false),
            mu: Linear::new(store, &format!("{name}.mu"), d_z, d_z, false),
            log_var: Linear::new(store, &format!("{name}.log_var"), d_z, d_z, false),
            out: Linear::new(store, &format!("{name}.out"), d_z, d_model, true),
            d_z,
        }
    }

    pub fn output_proj(&self) -> &Linear {
        &self.out
    }

    /// Distribution parameters for every position of `x`.
    pub fn latent<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<GaussianLatent> {
        let h = self.input.forward(g, p, x)?;
        let h = g.silu(h);
        Ok(GaussianLatent { mu: self.mu.forward(g, p, h)?, log_var: self.log_var.forward(g, p, h)? })
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: Var,
        source: ZSource,
    ) -> Result<ProbOutput> {
        let latent = self.latent(g, p, x)?;
        let z = match source {
            ZSource::Mean => latent.mu,
            ZSource::Sample(rng) => {
                let shape = g.shape(latent.mu).to_vec();
                let n = shape.iter().product::<usize>();
                let eps: Vec<F> =
                    (0..n).map(|_| F::of(StandardNormal.sample(&mut *rng))).collect();
                let eps = g.constant(&shape, eps)?;
                reparameterize(g, latent, eps)?
            }
            ZSource::Injected(z) => {
                if g.shape(z) != g.shape(latent.mu) {
                    return Err(TensorError::Contract(format!(
                        "injected latent has shape {:?}, expected {:?}",
                        g.shape(z),
                        g.shape(latent.mu)
                    )));
                }
                z
            }
        };
        let y = self.out.forward(g, p, z)?;
        Ok(ProbOutput { y, latent, z })
    }
}

/// `mu + exp(log_var / 2) * eps` with `eps` a fixed graph constant.
pub fn reparameterize<F: Scalar>(g: &mut Graph<F>, latent: GaussianLatent, eps: Var) -> Result<Var> {
    let half = g.scale(latent.log_var, F::of(0.5));
    let sigma = g.exp(half);
    let noise = g.mul(sigma, eps)?;
    g.add(latent.mu, noise)
}

pub struct BlockOutput {
    pub y: Var,
    pub prob: Option<ProbOutput>,
}

/// Attention, feed-forward and (optionally) prob sublayers, each followed by
/// residual add and layer norm.
pub struct Block {
    attn: MultiHeadAttention,
    attn_norm: LayerNorm,
    ff: FeedForward,
    ff_norm: LayerNorm,
    prob: Option<(ProbLayer, LayerNorm)>,
}

impl Block {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        d_z: Option<usize>,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d_model),
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, d_ff),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d_model),
            prob: d_z.map(|dz| {
                (
                    ProbLayer::new(store, &format!("{name}.prob"), d_model, dz),
                    LayerNorm::new(store, &format!("{name}.prob_norm"), d_model),
                )
            }),
        }
    }

    pub fn is_prob(&self) -> bool {
        self.prob.is_some()
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    pub fn feed_forward(&self) -> &FeedForward {
        &self.ff
    }

    pub fn prob_layer(&self) -> Option<&ProbLayer> {
        self.prob.as_ref().map(|(p, _)| p)
    }

    /// Attention and feed-forward sublayers only.
    pub fn forward_base<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: Var,
        drop: &mut DropoutCtx,
    ) -> Result<Var> {
        let a = self.attn.forward(g, p, x, drop)?;
        let a = drop.apply(g, a)?;
        let h = g.add(x, a)?;
        let h = self.attn_norm.forward(g, p, h)?;
        let f = self.ff.forward(g, p, h)?;
        let f = drop.apply(g, f)?;
        let h2 = g.add(h, f)?;
        self.ff_norm.forward(g, p, h2)
    }

    /// Full block. `source` is ignored for blocks without a prob layer.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: Var,
        source: ZSource,
        drop: &mut DropoutCtx,
    ) -> Result<BlockOutput> {
        let h = self.forward_base(g, p, x, drop)?;
        let Some((layer, norm)) = &self.prob else {
            return Ok(BlockOutput { y: h, prob: None });
        };
        let out = layer.forward(g, p, h, source)?;
        let r = g.add(h, out.y)?;
        let y = norm.forward(g, p, r)?;
        Ok(BlockOutput { y, prob: Some(out) })
    }
}
