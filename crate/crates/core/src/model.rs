//! Predictive and posterior encoders.
//!
//! The predictive model maps `X` to per-position logits, drawing one latent
//! per prob block on the way; each latent is conditioned on every earlier
//! block's draw through the computation graph. The posterior model sees `X`
//! and `Y` (summed embeddings) and exists only to produce the latents that
//! are injected into the predictive model during training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_encoding, Block, DropoutCtx, Embedding, GaussianLatent, Linear, ProbOutput, ZSource,
};
use crate::params::{Bound, ParamStore};
use crate::rng::{substream, StreamRng};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_blocks: usize,
    /// 1-based indices of the blocks carrying a prob layer.
    pub prob_blocks: Vec<usize>,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_z: usize,
    pub n_heads: usize,
    pub vocab_in: usize,
    pub vocab_out: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    /// Reference configuration for the 500-token synthetic task.
    fn default() -> Self {
        Self {
            n_blocks: 4,
            prob_blocks: vec![1, 2, 3, 4],
            d_model: 256,
            d_ff: 1024,
            d_z: 256,
            n_heads: 4,
            vocab_in: 500,
            vocab_out: 500,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_blocks == 0 || self.d_model == 0 || self.d_ff == 0 || self.d_z == 0 {
            return bad("block count and all widths must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.vocab_in == 0 || self.vocab_out == 0 {
            return bad("vocabularies must be non-empty".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let mut seen = vec![false; self.n_blocks + 1];
        for &b in &self.prob_blocks {
            if b == 0 || b > self.n_blocks {
                return bad(format!("prob block {b} outside 1..={}", self.n_blocks));
            }
            if std::mem::replace(&mut seen[b], true) {
                return bad(format!("prob block {b} listed twice"));
            }
        }
        Ok(())
    }

    /// Number of prob layers `M`.
    pub fn n_prob(&self) -> usize {
        self.prob_blocks.len()
    }

    fn is_prob(&self, block: usize) -> bool {
        self.prob_blocks.contains(&(block + 1))
    }

    /// Same architecture with no prob layers.
    pub fn vanilla(&self) -> Self {
        Self { prob_blocks: Vec::new(), ..self.clone() }
    }
}

/// Equal-length token sequences packed row-major as `[batch, seq_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn from_rows<T: AsRef<[u32]>>(rows: &[T]) -> Result<Self> {
        let seq_len = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.is_empty() || seq_len == 0 {
            return Err(Error::Input("empty token batch".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.as_ref().len() != seq_len) {
            return Err(Error::Input(format!(
                "ragged batch: lengths {} and {}",
                seq_len,
                r.as_ref().len()
            )));
        }
        let tokens = rows.iter().flat_map(|r| r.as_ref().iter().map(|&t| t as usize)).collect();
        Ok(Self { tokens, batch: rows.len(), seq_len })
    }

    pub fn single(row: &[u32]) -> Result<Self> {
        Self::from_rows(&[row])
    }

    fn check_vocab(&self, vocab: usize, what: &str) -> Result<()> {
        match self.tokens.iter().find(|&&t| t >= vocab) {
            Some(t) => Err(Error::Input(format!("{what} token {t} outside vocabulary of {vocab}"))),
            None => Ok(()),
        }
    }

    fn prefix(&self) -> [usize; 2] {
        [self.batch, self.seq_len]
    }
}

/// How the predictive model obtains each prob block's latent.
pub enum LatentMode<'a> {
    Mean,
    Sample(&'a mut StreamRng),
    /// One latent per prob block, in block order.
    Injected(&'a [Var]),
}

/// Inference modes exposed by [`PredictiveModel::predict`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Inference {
    Mean,
    Sample,
}

pub struct PredictiveOutput {
    pub logits: Var,
    pub latents: Vec<ProbOutput>,
}

/// Concrete values of one prob block's latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentValues<F> {
    pub mu: Vec<F>,
    pub log_var: Vec<F>,
    pub z: Vec<F>,
}

impl<F: Scalar> LatentValues<F> {
    fn read(g: &Graph<F>, p: &ProbOutput) -> Self {
        Self {
            mu: g.value(p.latent.mu).to_vec(),
            log_var: g.value(p.latent.log_var).to_vec(),
            z: g.value(p.z).to_vec(),
        }
    }
}

pub struct Prediction<F> {
    /// `[batch, seq_len, vocab_out]`, row-major.
    pub logits: Vec<F>,
    pub latents: Vec<LatentValues<F>>,
}

fn add_position_encoding<F: Scalar>(g: &mut Graph<F>, x: Var, seq_len: usize, d: usize) -> Result<Var> {
    let pe = sinusoidal_encoding(seq_len, d).into_iter().map(F::of).collect();
    let pe = g.constant(&[seq_len, d], pe)?;
    Ok(g.add(x, pe)?)
}

fn build_blocks<F: Scalar>(
    cfg: &ModelConfig,
    store: &mut ParamStore<F>,
    prefix: &str,
    count: usize,
) -> Vec<Block> {
    (0..count)
        .map(|i| {
            Block::new(
                store,
                &format!("{prefix}.blocks.{i}"),
                cfg.d_model,
                cfg.d_ff,
                cfg.n_heads,
                cfg.is_prob(i).then_some(cfg.d_z),
            )
        })
        .collect()
}

/// `P_phi(Y | X)`: embedding, `N` blocks, output head.
pub struct PredictiveModel<F> {
    cfg: ModelConfig,
    store: ParamStore<F>,
    embed: Embedding,
    blocks: Vec<Block>,
    head: Linear,
}

impl<F: Scalar> PredictiveModel<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let embed = Embedding::new(&mut store, "pred.embed_x", cfg.vocab_in, cfg.d_model);
        let blocks = build_blocks(cfg, &mut store, "pred", cfg.n_blocks);
        let head = Linear::new(&mut store, "pred.head", cfg.d_model, cfg.vocab_out, false);
        Ok(Self { cfg: cfg.clone(), store, embed, blocks, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Forward pass on a graph with parameters already bound.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: &TokenBatch,
        mut mode: LatentMode,
        drop: &mut DropoutCtx,
    ) -> Result<PredictiveOutput> {
        x.check_vocab(self.cfg.vocab_in, "source")?;
        if let LatentMode::Injected(zs) = &mode {
            if zs.len() != self.cfg.n_prob() {
                return Err(Error::Contract(format!(
                    "{} injected latents for {} prob blocks",
                    zs.len(),
                    self.cfg.n_prob()
                )));
            }
        }
        let e = self.embed.forward(g, p, &x.tokens, &x.prefix())?;
        let e = add_position_encoding(g, e, x.seq_len, self.cfg.d_model)?;
        let mut h = drop.apply(g, e)?;
        let mut latents = Vec::with_capacity(self.cfg.n_prob());
        for block in &self.blocks {
            let source = match &mut mode {
                LatentMode::Mean => ZSource::Mean,
                LatentMode::Sample(rng) => ZSource::Sample(&mut **rng),
                LatentMode::Injected(zs) => match zs.get(latents.len()) {
                    Some(&z) => ZSource::Injected(z),
                    None => ZSource::Mean,
                },
            };
            let out = block.forward(g, p, h, source, drop)?;
            h = out.y;
            latents.extend(out.prob);
        }
        let logits = self.head.forward(g, p, h)?;
        Ok(PredictiveOutput { logits, latents })
    }

    /// Inference without dropout: mean mode is deterministic, sample mode
    /// draws prob-layer noise from the `noise_seed` stream.
    pub fn predict(&self, x: &TokenBatch, mode: Inference, noise_seed: u64) -> Result<Prediction<F>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false)?;
        let mut rng = substream(noise_seed, "predict/noise", 0);
        let mode = match mode {
            Inference::Mean => LatentMode::Mean,
            Inference::Sample => LatentMode::Sample(&mut rng),
        };
        let out = self.forward(&mut g, &p, x, mode, &mut DropoutCtx::inactive())?;
        Ok(Prediction {
            logits: g.value(out.logits).to_vec(),
            latents: out.latents.iter().map(|l| LatentValues::read(&g, l)).collect(),
        })
    }
}

/// `Q_psi(Z | X, Y)`: same backbone as the predictive model with a second
/// input embedding for `Y` and no output head. Blocks after the last prob
/// block cannot influence any latent and are not built.
pub struct PosteriorModel<F> {
    cfg: ModelConfig,
    store: ParamStore<F>,
    embed_x: Embedding,
    embed_y: Embedding,
    blocks: Vec<Block>,
}

impl<F: Scalar> PosteriorModel<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let embed_x = Embedding::new(&mut store, "post.embed_x", cfg.vocab_in, cfg.d_model);
        let embed_y = Embedding::new(&mut store, "post.embed_y", cfg.vocab_out, cfg.d_model);
        let last = cfg.prob_blocks.iter().max().copied().unwrap_or(0);
        let blocks = build_blocks(cfg, &mut store, "post", last);
        Ok(Self { cfg: cfg.clone(), store, embed_x, embed_y, blocks })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// One reparameterized latent per prob block.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        x: &TokenBatch,
        y: &TokenBatch,
        noise: &mut StreamRng,
        drop: &mut DropoutCtx,
    ) -> Result<Vec<ProbOutput>> {
        if x.batch != y.batch || x.seq_len != y.seq_len {
            return Err(Error::Contract(format!(
                "source and target must align: {}x{} vs {}x{}",
                x.batch, x.seq_len, y.batch, y.seq_len
            )));
        }
        x.check_vocab(self.cfg.vocab_in, "source")?;
        y.check_vocab(self.cfg.vocab_out, "target")?;
        let ex = self.embed_x.forward(g, p, &x.tokens, &x.prefix())?;
        let ey = self.embed_y.forward(g, p, &y.tokens, &y.prefix())?;
        let e = g.add(ex, ey)?;
        let e = add_position_encoding(g, e, x.seq_len, self.cfg.d_model)?;
        let mut h = drop.apply(g, e)?;
        let mut latents = Vec::with_capacity(self.cfg.n_prob());
        for block in &self.blocks {
            let out = block.forward(g, p, h, ZSource::Sample(noise), drop)?;
            h = out.y;
            latents.extend(out.prob);
        }
        Ok(latents)
    }

    /// Dropout-free posterior latents with noise from the `noise_seed` stream.
    pub fn posterior_latents(
        &self,
        x: &TokenBatch,
        y: &TokenBatch,
        noise_seed: u64,
    ) -> Result<Vec<LatentValues<F>>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false)?;
        let mut rng = substream(noise_seed, "posterior/noise", 0);
        let out = self.forward(&mut g, &p, x, y, &mut rng, &mut DropoutCtx::inactive())?;
        Ok(out.iter().map(|l| LatentValues::read(&g, l)).collect())
    }
}

pub struct TrainForward {
    pub logits: Var,
    pub prior: Vec<GaussianLatent>,
    pub posterior: Vec<GaussianLatent>,
    pub z_post: Vec<Var>,
}

/// Posterior pass, then the predictive pass with the posterior latents
/// injected. The predictive prob layers still compute their own (prior)
/// distribution parameters; only their sampling step is bypassed.
#[allow(clippy::too_many_arguments)]
pub fn train_forward<F: Scalar>(
    pred: &PredictiveModel<F>,
    post: &PosteriorModel<F>,
    g: &mut Graph<F>,
    pred_params: &Bound,
    post_params: &Bound,
    x: &TokenBatch,
    y: &TokenBatch,
    noise: &mut StreamRng,
    pred_drop: &mut DropoutCtx,
    post_drop: &mut DropoutCtx,
) -> Result<TrainForward> {
    let (pc, qc) = (pred.config(), post.config());
    if pc.prob_blocks != qc.prob_blocks || pc.d_z != qc.d_z || pc.n_blocks != qc.n_blocks {
        return Err(Error::Contract(format!(
            "predictive prob blocks {:?} (d_z {}) vs posterior {:?} (d_z {})",
            pc.prob_blocks, pc.d_z, qc.prob_blocks, qc.d_z
        )));
    }
    let post_out = if pc.n_prob() == 0 {
        Vec::new()
    } else {
        post.forward(g, post_params, x, y, noise, post_drop)?
    };
    let z_post: Vec<Var> = post_out.iter().map(|o| o.z).collect();
    let out = pred.forward(g, pred_params, x, LatentMode::Injected(&z_post), pred_drop)?;
    Ok(TrainForward {
        logits: out.logits,
        prior: out.latents.iter().map(|o| o.latent).collect(),
        posterior: post_out.iter().map(|o| o.latent).collect(),
        z_post,
    })
}
