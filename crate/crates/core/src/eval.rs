//! Ensemble metrics against the ground-truth task distributions, and the
//! inference methods that produce ensembles.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{LatentMode, PredictiveModel, TokenBatch};
use crate::nn::DropoutCtx;
use crate::rng::{substream, StreamRng};
use crate::synthdata::{Context, Dataset, SparseDist, SynthTask};
use crate::tensor::Graph;

/// Additive smoothing applied to the true distribution inside the KL.
pub const KL_EPSILON: f64 = 1e-4;
/// Upper bound on `realizations * seq_len` per forward pass.
const TOKENS_PER_PASS: usize = 4096;

/// Realized tokens at one evaluation position, with the truth they are scored against.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionDraws {
    pub context: Context,
    pub tokens: Vec<u32>,
    pub truth: SparseDist,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub vocab: usize,
    pub positions: Vec<PositionDraws>,
}

impl Ensemble {
    fn check(&self) -> Result<()> {
        if self.positions.is_empty() || self.positions.iter().any(|p| p.tokens.is_empty()) {
            return Err(Error::Input("ensemble needs at least one position and one realization".into()));
        }
        Ok(())
    }

    fn mean_over_positions(&self, f: impl Fn(&PositionDraws) -> f64) -> Result<f64> {
        self.check()?;
        Ok(self.positions.iter().map(f).sum::<f64>() / self.positions.len() as f64)
    }
}

fn counts(tokens: &[u32]) -> HashMap<u32, usize> {
    let mut c = HashMap::new();
    for &t in tokens {
        *c.entry(t).or_insert(0) += 1;
    }
    c
}

/// Fraction of realized tokens with non-zero true probability.
pub fn validity(e: &Ensemble) -> Result<f64> {
    e.mean_over_positions(|p| {
        let ok = p.tokens.iter().filter(|&&t| p.truth.prob(t) > 0.0).count();
        ok as f64 / p.tokens.len() as f64
    })
}

/// `KL(empirical || smoothed truth)`, smoothing each vocabulary entry by `eps`.
pub fn kl_divergence(e: &Ensemble, eps: f64) -> Result<f64> {
    let z = 1.0 + e.vocab as f64 * eps;
    e.mean_over_positions(|p| {
        let r = p.tokens.len() as f64;
        counts(&p.tokens)
            .into_iter()
            .map(|(t, c)| {
                let ph = c as f64 / r;
                let q = (p.truth.prob(t) + eps) / z;
                ph * (ph / q).ln()
            })
            .sum()
    })
}

/// Distinct realized tokens over true support size.
pub fn diversity(e: &Ensemble) -> Result<f64> {
    e.mean_over_positions(|p| counts(&p.tokens).len() as f64 / p.truth.support_len() as f64)
}

/// Half the L1 distance between empirical and true distributions.
pub fn total_variation(e: &Ensemble) -> Result<f64> {
    e.mean_over_positions(|p| {
        let r = p.tokens.len() as f64;
        let c = counts(&p.tokens);
        let on_support: f64 = p
            .truth
            .tokens
            .iter()
            .zip(&p.truth.probs)
            .map(|(t, &q)| (c.get(t).copied().unwrap_or(0) as f64 / r - q).abs())
            .sum();
        let off_support: f64 = c
            .iter()
            .filter(|(t, _)| p.truth.prob(**t) == 0.0)
            .map(|(_, &n)| n as f64 / r)
            .sum();
        0.5 * (on_support + off_support)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub validity: f64,
    pub kl: f64,
    pub diversity: f64,
    pub tv: f64,
}

impl MetricReport {
    pub fn compute(e: &Ensemble) -> Result<Self> {
        Ok(Self {
            validity: validity(e)?,
            kl: kl_divergence(e, KL_EPSILON)?,
            diversity: diversity(e)?,
            tv: total_variation(e)?,
        })
    }

    fn fields(&self) -> [f64; 4] {
        [self.validity, self.kl, self.diversity, self.tv]
    }

    fn from_fields(f: [f64; 4]) -> Self {
        Self { validity: f[0], kl: f[1], diversity: f[2], tv: f[3] }
    }

    /// Per-field mean and sample standard deviation (zero for one report).
    pub fn mean_std(reports: &[Self]) -> (Self, Self) {
        let n = reports.len().max(1) as f64;
        let mut mean = [0.0; 4];
        for r in reports {
            for (m, v) in mean.iter_mut().zip(r.fields()) {
                *m += v / n;
            }
        }
        let mut var = [0.0; 4];
        if reports.len() > 1 {
            for r in reports {
                for ((s, v), m) in var.iter_mut().zip(r.fields()).zip(mean) {
                    *s += (v - m).powi(2) / (n - 1.0);
                }
            }
        }
        (Self::from_fields(mean), Self::from_fields(var.map(f64::sqrt)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Sample inference through the prob layers, argmax per position.
    ProbSample,
    /// Dropout kept on at inference, argmax per pass.
    McDropout,
    /// One deterministic pass, categorical draws from the softmax.
    SoftmaxSample,
    /// Draws straight from the true distributions.
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ProbSample => "prob_sample",
            Method::McDropout => "mc_dropout",
            Method::SoftmaxSample => "softmax_sample",
            Method::Oracle => "oracle",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "prob_sample" | "prob" => Method::ProbSample,
            "mc_dropout" | "dropout" => Method::McDropout,
            "softmax_sample" | "softmax" => Method::SoftmaxSample,
            "oracle" => Method::Oracle,
            _ => return Err(Error::Input(format!("unknown method {s:?}"))),
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn softmax_draw(row: &[f32], rng: &mut StreamRng) -> u32 {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let w: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &p) in w.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (w.len() - 1) as u32
}

/// Per-sequence realizations `[r][position]` from a trained model.
fn realize(
    model: &PredictiveModel<f32>,
    x: &[u32],
    method: Method,
    r: usize,
    rng: &mut StreamRng,
) -> Result<Vec<Vec<u32>>> {
    let cfg = model.config();
    let (s, v) = (x.len(), cfg.vocab_out);
    let logits_for = |copies: usize, rng: &mut StreamRng, method: Method| {
        let batch = TokenBatch::from_rows(&vec![x; copies])?;
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false)?;
        let (mode, mut drop) = match method {
            Method::ProbSample => (LatentMode::Sample(rng), DropoutCtx::inactive()),
            Method::McDropout => (LatentMode::Mean, DropoutCtx::active(cfg.dropout, rng)),
            _ => (LatentMode::Mean, DropoutCtx::inactive()),
        };
        let out = model.forward(&mut g, &p, &batch, mode, &mut drop)?;
        Ok::<_, Error>(g.value(out.logits).to_vec())
    };
    let chunk = (TOKENS_PER_PASS / s).max(1);
    let mut rows = Vec::with_capacity(r);
    match method {
        Method::ProbSample | Method::McDropout => {
            while rows.len() < r {
                let n = chunk.min(r - rows.len());
                let logits = logits_for(n, rng, method)?;
                for k in 0..n {
                    rows.push((0..s).map(|i| argmax(&logits[(k * s + i) * v..][..v])).collect());
                }
            }
        }
        Method::SoftmaxSample => {
            let logits = logits_for(1, rng, method)?;
            for _ in 0..r {
                rows.push((0..s).map(|i| softmax_draw(&logits[i * v..][..v], rng)).collect());
            }
        }
        Method::Oracle => unreachable!("oracle draws do not use a model"),
    }
    Ok(rows)
}

fn assemble(task: &SynthTask, data: &Dataset, mut draw: impl FnMut(usize) -> Result<Vec<Vec<u32>>>) -> Result<Ensemble> {
    let mut positions = Vec::new();
    for (i, sample) in data.samples.iter().enumerate() {
        let rows = draw(i)?;
        for (j, &ctx) in sample.contexts.iter().enumerate() {
            positions.push(PositionDraws {
                context: ctx,
                tokens: rows.iter().map(|row| row[j]).collect(),
                truth: task.dist(ctx).clone(),
            });
        }
    }
    Ok(Ensemble { vocab: task.spec.vocab_out, positions })
}

/// `r` realizations for every position of `data` using `method`.
pub fn run_inference(
    model: &PredictiveModel<f32>,
    task: &SynthTask,
    data: &Dataset,
    method: Method,
    r: usize,
    seed: u64,
) -> Result<Ensemble> {
    let cfg = model.config();
    if r == 0 {
        return Err(Error::Input("need at least one realization".into()));
    }
    if method == Method::ProbSample && cfg.n_prob() == 0 {
        return Err(Error::Contract("prob_sample needs a model with at least one prob layer".into()));
    }
    if method == Method::Oracle {
        return oracle_ensemble(task, data, r, seed);
    }
    if cfg.vocab_out != task.spec.vocab_out || cfg.vocab_in != task.spec.vocab_in {
        return Err(Error::Mismatch(format!(
            "model vocabularies {}/{} do not match task {}/{}",
            cfg.vocab_in, cfg.vocab_out, task.spec.vocab_in, task.spec.vocab_out
        )));
    }
    assemble(task, data, |i| {
        let mut rng = substream(seed, &format!("eval/{}", method.name()), i as u64);
        realize(model, &data.samples[i].x, method, r, &mut rng)
    })
}

/// Realizations drawn from the true distributions themselves.
pub fn oracle_ensemble(task: &SynthTask, data: &Dataset, r: usize, seed: u64) -> Result<Ensemble> {
    if r == 0 {
        return Err(Error::Input("need at least one realization".into()));
    }
    assemble(task, data, |i| {
        let mut rng = substream(seed, "eval/oracle", i as u64);
        let ctxs = &data.samples[i].contexts;
        Ok((0..r).map(|_| ctxs.iter().map(|&c| task.dist(c).sample(&mut rng)).collect()).collect())
    })
}

pub const CSV_HEADER: &str = "method,seed,validity,kl,diversity,tv";

fn csv_row(out: &mut String, method: &str, seed: &str, m: &MetricReport) {
    let _ = writeln!(out, "{method},{seed},{},{},{},{}", m.validity, m.kl, m.diversity, m.tv);
}

/// Per-seed rows followed by `mean` and `std` rows for every method.
pub fn metrics_csv(results: &[(Method, Vec<(u64, MetricReport)>)]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for (method, runs) in results {
        for (seed, m) in runs {
            csv_row(&mut out, method.name(), &seed.to_string(), m);
        }
        let reports: Vec<_> = runs.iter().map(|r| r.1).collect();
        let (mean, std) = MetricReport::mean_std(&reports);
        csv_row(&mut out, method.name(), "mean", &mean);
        csv_row(&mut out, method.name(), "std", &std);
    }
    out
}

/// Fixed-width table of mean ± std per method.
pub fn metrics_table(results: &[(Method, Vec<(u64, MetricReport)>)]) -> String {
    let mut out = format!(
        "{:<16} {:>17} {:>17} {:>17} {:>17}\n",
        "Method", "Validity", "KL-Divergence", "Diversity", "Total Variation"
    );
    for (method, runs) in results {
        let reports: Vec<_> = runs.iter().map(|r| r.1).collect();
        let (m, s) = MetricReport::mean_std(&reports);
        let cell = |a: f64, b: f64| format!("{a:.3} ± {b:.3}");
        let _ = writeln!(
            out,
            "{:<16} {:>17} {:>17} {:>17} {:>17}",
            method.name(),
            cell(m.validity, s.validity),
            cell(m.kl, s.kl),
            cell(m.diversity, s.diversity),
            cell(m.tv, s.tv)
        );
    }
    out
}
