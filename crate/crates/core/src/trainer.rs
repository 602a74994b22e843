//! Training loops for the prob model (posterior injection plus GECO) and the
//! vanilla baseline (plain cross-entropy), with per-epoch validation,
//! logging and resumable checkpoints.
//!
//! Every random draw of step `t` comes from substreams indexed by `t`, so a
//! run resumed from a checkpoint replays exactly the draws the uninterrupted
//! run would have made.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, Entry};
use crate::config::{ModelKind, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{run_inference, Method, MetricReport};
use crate::model::{train_forward, LatentMode, PosteriorModel, PredictiveModel, TokenBatch};
use crate::nn::DropoutCtx;
use crate::objective::{geco_loss, hierarchical_kl, reconstruction_loss, GecoState};
use crate::optim::AdamW;
use crate::params::{Param, ParamStore};
use crate::rng::{substream, StreamRng};
use crate::synthdata::{Dataset, SynthTask};
use crate::tensor::Graph;

pub const LOG_HEADER: &str = "epoch,l_rec_mean,d_kl_mean,lambda,kappa,constraint_Lc,lr,val_metric";

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub l_rec_mean: f64,
    pub d_kl_mean: f64,
    pub lambda: f64,
    /// After this epoch's annealing decision.
    pub kappa: f64,
    pub constraint_lc: f64,
    pub lr: f64,
    /// Validation KL-divergence.
    pub val_metric: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.l_rec_mean,
            self.d_kl_mean,
            self.lambda,
            self.kappa,
            self.constraint_lc,
            self.lr,
            self.val_metric
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMeta {
    pub epoch: usize,
    pub val_metric: f64,
}

/// Everything besides parameters and optimizer moments needed to resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub geco: GecoState,
    /// Batch-weighted sum of `D_KL` over the current epoch.
    pub kl_sum: f64,
    pub lr: f64,
    pub log: Vec<LogRow>,
    pub best: Option<BestMeta>,
}

/// Scalars observed at one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub l_rec: f64,
    pub d_kl: f64,
    pub loss: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub ema_rec: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct Trainer<'a> {
    cfg: RunConfig,
    task: &'a SynthTask,
    train: &'a Dataset,
    val: &'a Dataset,
    /// Training-sample indices grouped by sequence length.
    buckets: BTreeMap<usize, Vec<usize>>,
    pred: PredictiveModel<f32>,
    post: Option<PosteriorModel<f32>>,
    opt: AdamW<f32>,
    state: TrainState,
    best: Option<ParamStore<f32>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &RunConfig, task: &'a SynthTask, train: &'a Dataset, val: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if task.spec != cfg.task {
            return Err(Error::Mismatch("task file does not match the task section of the config".into()));
        }
        train.check_task(task)?;
        val.check_task(task)?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Input("training and validation sets must be non-empty".into()));
        }
        let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in train.samples.iter().enumerate() {
            buckets.entry(s.x.len()).or_default().push(i);
        }
        let model_cfg = cfg.effective_model();
        let seed = cfg.train.seed;
        let pred = PredictiveModel::new(&model_cfg, seed)?;
        let post = match cfg.train.model {
            ModelKind::Prob if model_cfg.n_prob() > 0 => Some(PosteriorModel::new(&model_cfg, seed)?),
            _ => None,
        };
        let opt = AdamW::new(pred.params().iter().chain(post.iter().flat_map(|p| p.params().iter())));
        let state = TrainState {
            step: 0,
            geco: GecoState::new(cfg.train.kappa_init),
            kl_sum: 0.0,
            lr: 0.0,
            log: Vec::new(),
            best: None,
        };
        Ok(Self { cfg: cfg.clone(), task, train, val, buckets, pred, post, opt, state, best: None })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn predictive(&self) -> &PredictiveModel<f32> {
        &self.pred
    }

    pub fn posterior(&self) -> Option<&PosteriorModel<f32>> {
        self.post.as_ref()
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.optim.total_steps()
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// Predictive model with the best-validation parameters, or the current
    /// ones before the first validation.
    pub fn best_model(&self) -> Result<PredictiveModel<f32>> {
        let mut m = PredictiveModel::new(self.pred.config(), self.cfg.train.seed)?;
        let src = self.best.as_ref().unwrap_or(self.pred.params());
        for (dst, p) in m.params_mut().iter_mut().zip(src.iter()) {
            dst.data.copy_from_slice(&p.data);
        }
        Ok(m)
    }

    fn draw_batch(&self, rng: &mut StreamRng) -> Result<(TokenBatch, TokenBatch)> {
        let anchor = rng.random_range(0..self.train.len());
        let bucket = &self.buckets[&self.train.samples[anchor].x.len()];
        let picks: Vec<usize> =
            (0..self.cfg.train.batch_size).map(|_| bucket[rng.random_range(0..bucket.len())]).collect();
        let xs: Vec<&[u32]> = picks.iter().map(|&i| self.train.samples[i].x.as_slice()).collect();
        let ys: Vec<&[u32]> = picks.iter().map(|&i| self.train.samples[i].y.as_slice()).collect();
        Ok((TokenBatch::from_rows(&xs)?, TokenBatch::from_rows(&ys)?))
    }

    fn last_row(&self) -> String {
        self.state.log.last().map(LogRow::to_csv).unwrap_or_else(|| "none".into())
    }

    /// One optimizer step; closes the epoch when it is the epoch's last step.
    pub fn step(&mut self) -> Result<StepStats> {
        if self.is_done() {
            return Err(Error::Contract("training already finished".into()));
        }
        let t = self.state.step;
        let seed = self.cfg.train.seed;
        let (x, y) = self.draw_batch(&mut substream(seed, "batch", t))?;
        let rate = self.pred.config().dropout;
        let mut pred_rng = substream(seed, "dropout/pred", t);
        let mut post_rng = substream(seed, "dropout/post", t);
        let mut noise = substream(seed, "noise", t);
        let mut pred_drop = DropoutCtx::active(rate, &mut pred_rng);

        let mut g = Graph::<f32>::new();
        let pp = self.pred.params().bind(&mut g, true)?;
        let (logits, d_kl, qp) = match &self.post {
            Some(post) => {
                let qp = post.params().bind(&mut g, true)?;
                let mut post_drop = DropoutCtx::active(rate, &mut post_rng);
                let out = train_forward(
                    &self.pred,
                    post,
                    &mut g,
                    &pp,
                    &qp,
                    &x,
                    &y,
                    &mut noise,
                    &mut pred_drop,
                    &mut post_drop,
                )?;
                let kl = hierarchical_kl(&mut g, &out.posterior, &out.prior)?;
                (out.logits, Some(kl), Some(qp))
            }
            None => {
                let out = self.pred.forward(&mut g, &pp, &x, LatentMode::Mean, &mut pred_drop)?;
                (out.logits, None, None)
            }
        };
        let l_rec = reconstruction_loss(&mut g, logits, &y.tokens)?;
        let loss = match self.cfg.train.model {
            ModelKind::Prob => {
                let kl = match d_kl {
                    Some(kl) => kl,
                    None => g.scalar(0.0),
                };
                geco_loss(&mut g, l_rec, kl, &self.state.geco)?
            }
            ModelKind::Vanilla => l_rec,
        };
        let (l_rec_v, loss_v) = (g.item(l_rec) as f64, g.item(loss) as f64);
        let d_kl_v = d_kl.map(|v| g.item(v) as f64).unwrap_or(0.0);
        if !loss_v.is_finite() {
            return Err(Error::NonFiniteLoss { step: t + 1, last_row: self.last_row() });
        }
        g.backward(loss)?;

        let vars = pp.vars().iter().chain(qp.iter().flat_map(|q| q.vars().iter()));
        let grads: Vec<Vec<f32>> = vars
            .map(|&v| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
            .collect();
        drop(g);
        let lr = self.cfg.optim.schedule(t + 1);
        let mut params: Vec<&mut Param<f32>> = self.pred.params_mut().iter_mut().collect();
        if let Some(post) = self.post.as_mut() {
            params.extend(post.params_mut().iter_mut());
        }
        let grad_norm = self.opt.step(&mut params, grads, lr, &self.cfg.optim)?;

        let batch = x.batch as f64;
        let geco = &mut self.state.geco;
        if self.cfg.train.model == ModelKind::Prob && !self.cfg.train.freeze_lambda {
            geco.lambda_step(l_rec_v, lr);
        }
        geco.record(l_rec_v, batch);
        self.state.kl_sum += d_kl_v * batch;
        self.state.step = t + 1;
        self.state.lr = lr;
        let stats = StepStats {
            step: t + 1,
            l_rec: l_rec_v,
            d_kl: d_kl_v,
            loss: loss_v,
            lambda: geco.lambda,
            kappa: geco.kappa,
            ema_rec: geco.ema_rec,
            lr,
            grad_norm,
        };
        if self.state.step % self.cfg.optim.steps_per_epoch as u64 == 0 {
            self.end_epoch()?;
        }
        Ok(stats)
    }

    fn end_epoch(&mut self) -> Result<()> {
        let epoch = (self.state.step / self.cfg.optim.steps_per_epoch as u64) as usize;
        let geco = &mut self.state.geco;
        let count = geco.count.max(1.0);
        let l_rec_mean = geco.sum_rec / count;
        let d_kl_mean = self.state.kl_sum / count;
        let anneal = self.cfg.train.kappa_annealing && self.cfg.train.model == ModelKind::Prob;
        let c = geco.end_epoch(anneal);
        self.state.kl_sum = 0.0;
        let val_metric = self.validate()?.kl;
        let geco = &self.state.geco;
        self.state.log.push(LogRow {
            epoch,
            l_rec_mean,
            d_kl_mean,
            lambda: geco.lambda,
            kappa: geco.kappa,
            constraint_lc: c.constraint,
            lr: self.state.lr,
            val_metric,
        });
        if self.state.best.is_none_or(|b| val_metric < b.val_metric) {
            self.state.best = Some(BestMeta { epoch, val_metric });
            self.best = Some(self.pred.params().clone());
        }
        Ok(())
    }

    /// Validation metrics of the current predictive model.
    pub fn validate(&self) -> Result<MetricReport> {
        let n = match self.cfg.train.val_samples {
            0 => self.val.len(),
            n => n.min(self.val.len()),
        };
        let method =
            if self.pred.config().n_prob() > 0 { Method::ProbSample } else { Method::SoftmaxSample };
        let data = self.val.truncated(n);
        let e = run_inference(&self.pred, self.task, &data, method, self.cfg.train.val_realizations, self.cfg.train.seed)?;
        MetricReport::compute(&e)
    }

    /// Step until `step` optimizer steps have been taken (or training ends).
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        while self.state.step < step.min(self.total_steps()) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_steps())
    }

    pub fn log_csv(&self) -> String {
        log_csv(&self.state.log)
    }

    fn stores(&self) -> impl Iterator<Item = &Param<f32>> {
        self.pred.params().iter().chain(self.post.iter().flat_map(|p| p.params().iter()))
    }

    pub fn checkpoint(&self) -> Container {
        let mut c = Container {
            config_json: self.cfg.to_json(),
            state_json: serde_json::to_string(&self.state).expect("state serializes"),
            entries: Vec::new(),
        };
        c.push_store("", self.pred.params());
        if let Some(post) = &self.post {
            c.push_store("", post.params());
        }
        for (kind, slots) in [("adam.m/", &self.opt.m), ("adam.v/", &self.opt.v)] {
            for (p, data) in self.stores().zip(slots) {
                c.entries.push(Entry {
                    name: format!("{kind}{}", p.name),
                    shape: p.shape.clone(),
                    data: data.clone(),
                });
            }
        }
        if let Some(best) = &self.best {
            c.push_store("best/", best);
        }
        c
    }

    /// Rebuild a trainer from `container`; `cfg` must equal the stored config.
    pub fn resume(
        cfg: &RunConfig,
        task: &'a SynthTask,
        train: &'a Dataset,
        val: &'a Dataset,
        container: &Container,
    ) -> Result<Self> {
        let stored = RunConfig::from_json(&container.config_json)?;
        let diff = stored.diff(cfg);
        if !diff.is_empty() {
            return Err(Error::Mismatch(format!("config differs from checkpoint in: {}", diff.join(", "))));
        }
        let mut t = Self::new(cfg, task, train, val)?;
        container.fill_store("", t.pred.params_mut())?;
        if let Some(post) = t.post.as_mut() {
            container.fill_store("", post.params_mut())?;
        }
        let names: Vec<(String, usize)> = t.stores().map(|p| (p.name.clone(), p.data.len())).collect();
        for (kind, slots) in [("adam.m/", &mut t.opt.m), ("adam.v/", &mut t.opt.v)] {
            for ((name, len), slot) in names.iter().zip(slots.iter_mut()) {
                let key = format!("{kind}{name}");
                match container.find(&key) {
                    Some(e) if e.data.len() == *len => slot.copy_from_slice(&e.data),
                    _ => return Err(Error::Mismatch(format!("missing or malformed entry {key}"))),
                }
            }
        }
        t.state = serde_json::from_str(&container.state_json)
            .map_err(|e| Error::Format { offset: 0, msg: format!("checkpoint state: {e}") })?;
        t.opt.t = t.state.step;
        if container.has_prefix("best/") {
            let mut best = t.pred.params().clone();
            container.fill_store("best/", &mut best)?;
            t.best = Some(best);
        }
        Ok(t)
    }
}

/// Predictive model stored in a checkpoint; prefers the best-validation
/// snapshot unless `latest` is set.
pub fn load_model(container: &Container, latest: bool) -> Result<(RunConfig, PredictiveModel<f32>)> {
    let cfg = RunConfig::from_json(&container.config_json)?;
    let mut model = PredictiveModel::new(&cfg.effective_model(), cfg.train.seed)?;
    let prefix = if !latest && container.has_prefix("best/") { "best/" } else { "" };
    container.fill_store(prefix, model.params_mut())?;
    Ok((cfg, model))
}

fn with_kind(cfg: &RunConfig, kind: ModelKind) -> RunConfig {
    let mut c = cfg.clone();
    c.train.model = kind;
    c
}

/// Full GECO training run of the prob model.
pub fn train_prob<'a>(
    cfg: &RunConfig,
    task: &'a SynthTask,
    train: &'a Dataset,
    val: &'a Dataset,
) -> Result<Trainer<'a>> {
    let mut t = Trainer::new(&with_kind(cfg, ModelKind::Prob), task, train, val)?;
    t.run()?;
    Ok(t)
}

/// Full cross-entropy training run of the vanilla baseline.
pub fn train_vanilla<'a>(
    cfg: &RunConfig,
    task: &'a SynthTask,
    train: &'a Dataset,
    val: &'a Dataset,
) -> Result<Trainer<'a>> {
    let mut t = Trainer::new(&with_kind(cfg, ModelKind::Vanilla), task, train, val)?;
    t.run()?;
    Ok(t)
}
