//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 4 and 7 are empirical reproduction targets; their lines report the
//! measured numbers but do not change the exit status. Every other criterion
//! must pass. `PROBTRANS_ACCEPTANCE=1,3,8` runs a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use probtrans::checkpoint::Container;
use probtrans::config::{ModelKind, RunConfig};
use probtrans::eval::{oracle_ensemble, run_inference, Method, MetricReport, CSV_HEADER};
use probtrans::gradcheck::{check_inputs, check_stores, GradReport};
use probtrans::model::{
    train_forward, Inference, LatentMode, ModelConfig, PosteriorModel, PredictiveModel, TokenBatch,
};
use probtrans::nn::{DropoutCtx, FeedForward, GaussianLatent, LayerNorm, Linear, MultiHeadAttention, ProbLayer, ZSource};
use probtrans::objective::{gaussian_kl, geco_loss, hierarchical_kl, reconstruction_loss, GecoState};
use probtrans::optim::OptimConfig;
use probtrans::params::ParamStore;
use probtrans::rng::{substream, StreamRng};
use probtrans::synthdata::{build_task, dataset_to_string, generate_splits, Dataset, Splits, SynthTask, TaskSpec};
use probtrans::tensor::{Graph, Tensor, Var};
use probtrans::trainer::{load_model, Trainer};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// `Ok(detail)` passes, `Err(detail)` fails.
type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- criterion 1

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: u64 = 24;

fn uniform(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> probtrans::Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = uniform(&mut substream(seed, "project", 0), &shape);
    let w = g.constant(&shape, w.data().to_vec())?;
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn scramble(store: &mut ParamStore<f64>, rng: &mut StreamRng) {
    for p in store.iter_mut() {
        p.data.iter_mut().for_each(|x| *x = rng.random_range(-0.8..0.8));
    }
}

/// Every graph operation in one expression.
fn ops_instance(rng: &mut StreamRng, i: u64) -> probtrans::Result<GradReport> {
    let (b, s, d) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(2..=8));
    let vocab = rng.random_range(2..=6);
    let ids: Vec<usize> = (0..b * s).map(|_| rng.random_range(0..vocab)).collect();
    let targets: Vec<usize> = (0..b * s).map(|_| rng.random_range(0..d)).collect();
    let inputs = [uniform(rng, &[vocab, d]), uniform(rng, &[d]), uniform(rng, &[d]), uniform(rng, &[d, d])];
    check_inputs(&inputs, H, FLOOR, |g, v| {
        let x = g.embedding(v[0], &ids, &[b, s])?;
        let x = g.layer_norm(x, v[1], v[2], 1e-5)?;
        let h = g.matmul(x, v[3])?;
        let h = g.silu(h);
        let e = g.scale(h, 0.5);
        let e = g.exp(e);
        let l = g.add_scalar(e, 1.0);
        let l = g.log(l)?;
        let t = g.transpose(l)?;
        let t = g.reshape(t, &[b, d, s])?;
        let p = g.permute(t, &[0, 2, 1])?;
        let att = g.matmul(p, t)?;
        let sm = g.softmax(att, 2)?;
        let ctx = g.matmul(sm, p)?;
        let mut mask = substream(i, "mask", 0);
        let ctx = g.dropout(ctx, 0.25, &mut mask)?;
        let y = g.sub(ctx, x)?;
        let y = g.mul(y, v[1])?;
        let y = g.neg(y);
        let y = g.add(y, x)?;
        let ce = g.cross_entropy(y, &targets)?;
        let m = g.mean(y);
        let proj = project(g, y, i)?;
        let a = g.add(ce, m)?;
        Ok(g.add(a, proj)?)
    })
}

/// The building blocks with randomized parameters.
fn layers_instance(rng: &mut StreamRng, i: u64) -> probtrans::Result<GradReport> {
    let (b, s) = (rng.random_range(1..=2), rng.random_range(1..=4));
    let heads = rng.random_range(1..=2);
    let d = 2 * heads * rng.random_range(1..=2);
    let d_ff = rng.random_range(1..=8);
    let d_z = rng.random_range(1..=4);
    let mut store = ParamStore::<f64>::new(i);
    let lin = Linear::new(&mut store, "lin", d, d, false);
    let ln = LayerNorm::new(&mut store, "ln", d);
    let attn = MultiHeadAttention::new(&mut store, "attn", d, heads);
    let ff = FeedForward::new(&mut store, "ff", d, d_ff);
    let prob = ProbLayer::new(&mut store, "prob", d, d_z);
    scramble(&mut store, rng);
    let x = uniform(rng, &[b, s, d]);
    check_stores(&[&store], H, FLOOR, |g, p| {
        let p = &p[0];
        let x = g.constant(&[b, s, d], x.data().to_vec())?;
        let h = lin.forward(g, p, x)?;
        let h = ln.forward(g, p, h)?;
        let mut drop_rng = substream(i, "drop", 0);
        let a = attn.forward(g, p, h, &mut DropoutCtx::active(0.2, &mut drop_rng))?;
        let f = ff.forward(g, p, a)?;
        let mut noise = substream(i, "noise", 0);
        let out = prob.forward(g, p, f, ZSource::Sample(&mut noise))?;
        let terms = [project(g, out.y, i)?, project(g, out.latent.mu, i + 1)?, project(g, out.latent.log_var, i + 2)?];
        let ab = g.add(terms[0], terms[1])?;
        Ok(g.add(ab, terms[2])?)
    })
}

/// The complete training objective: posterior latents injected into the
/// predictive model, fixed noise and dropout masks, GECO loss with `lambda != 1`.
fn train_forward_instance(rng: &mut StreamRng, i: u64) -> probtrans::Result<GradReport> {
    let (b, s) = (rng.random_range(1..=2), rng.random_range(1..=4));
    let n_blocks = rng.random_range(1..=3);
    let mut prob_blocks: Vec<usize> = (1..=n_blocks).filter(|_| rng.random_bool(0.6)).collect();
    if prob_blocks.is_empty() {
        prob_blocks.push(rng.random_range(1..=n_blocks));
    }
    let cfg = ModelConfig {
        n_blocks,
        prob_blocks,
        d_model: if rng.random_bool(0.5) { 4 } else { 8 },
        d_ff: rng.random_range(2..=8),
        d_z: rng.random_range(1..=4),
        n_heads: 2,
        vocab_in: rng.random_range(2..=6),
        vocab_out: rng.random_range(2..=6),
        dropout: 0.1,
    };
    let mut pred = PredictiveModel::<f64>::new(&cfg, i)?;
    let mut post = PosteriorModel::<f64>::new(&cfg, i)?;
    scramble(pred.params_mut(), rng);
    scramble(post.params_mut(), rng);
    let rows = |rng: &mut StreamRng, vocab: usize| -> Vec<Vec<u32>> {
        (0..b).map(|_| (0..s).map(|_| rng.random_range(0..vocab as u32)).collect()).collect()
    };
    let x = TokenBatch::from_rows(&rows(rng, cfg.vocab_in))?;
    let y = TokenBatch::from_rows(&rows(rng, cfg.vocab_out))?;
    let mut geco = GecoState::new(0.3);
    geco.lambda = 1.7;
    check_stores(&[pred.params(), post.params()], H, FLOOR, |g, p| {
        let mut noise = substream(i, "noise", 0);
        let (mut dp, mut dq) = (substream(i, "dropout/pred", 0), substream(i, "dropout/post", 0));
        let out = train_forward(
            &pred,
            &post,
            g,
            &p[0],
            &p[1],
            &x,
            &y,
            &mut noise,
            &mut DropoutCtx::active(0.1, &mut dp),
            &mut DropoutCtx::active(0.1, &mut dq),
        )?;
        let rec = reconstruction_loss(g, out.logits, &y.tokens)?;
        let kl = hierarchical_kl(g, &out.posterior, &out.prior)?;
        geco_loss(g, rec, kl, &geco)
    })
}

fn criterion_1() -> Check {
    let suites: [(&str, fn(&mut StreamRng, u64) -> probtrans::Result<GradReport>); 3] =
        [("ops", ops_instance), ("layers", layers_instance), ("train_forward", train_forward_instance)];
    let mut summary = Vec::new();
    for (name, f) in suites {
        let mut worst = 0.0f64;
        let mut checked = 0;
        for i in 0..GRAD_INSTANCES {
            let r = f(&mut substream(1, name, i), i).map_err(fail)?;
            ensure(r.checked > 0, || format!("{name} #{i}: no gradients checked"))?;
            ensure(r.max_rel_err < GRAD_TOL, || {
                format!("{name} #{i}: relative error {:.3e} at {:?}", r.max_rel_err, r.worst)
            })?;
            worst = worst.max(r.max_rel_err);
            checked += r.checked;
        }
        summary.push(format!("{name} max {worst:.2e} over {checked} entries"));
    }
    Ok(format!("{} instances each; {}", GRAD_INSTANCES, summary.join(", ")))
}

// ---------------------------------------------------------------- criterion 2

fn log_normal(x: f64, mu: f64, log_var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI).ln() + log_var + (x - mu).powi(2) / log_var.exp())
}

/// Stratified Monte-Carlo `E_q[log q - log p]`: one uniform draw per
/// equal-probability stratum of `q`.
fn monte_carlo_kl(q: (f64, f64), p: (f64, f64), n: usize, rng: &mut StreamRng) -> f64 {
    let normal = Normal::standard();
    let sd = (0.5 * q.1).exp();
    let mut total = 0.0;
    for i in 0..n {
        let u = (i as f64 + rng.random::<f64>()) / n as f64;
        let x = q.0 + sd * normal.inverse_cdf(u);
        total += log_normal(x, q.0, q.1) - log_normal(x, p.0, p.1);
    }
    total / n as f64
}

fn closed_form_kl(q: (f64, f64), p: (f64, f64)) -> f64 {
    let mut g = Graph::<f64>::new();
    let mut c = |v: f64| g.constant(&[1, 1], vec![v]).unwrap();
    let ql = GaussianLatent { mu: c(q.0), log_var: c(q.1) };
    let pl = GaussianLatent { mu: c(p.0), log_var: c(p.1) };
    let kl = gaussian_kl(&mut g, ql, pl).unwrap();
    g.item(kl)
}

fn criterion_2() -> Check {
    let mut rng = substream(2, "kl-instances", 0);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let mut draw = || (rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5));
        let (q, p) = (draw(), draw());
        let exact = closed_form_kl(q, p);
        let mc = monte_carlo_kl(q, p, 1_000_000, &mut substream(2, "kl-draws", i));
        let rel = (exact - mc).abs() / exact;
        ensure(rel <= 0.01, || format!("instance {i}: closed form {exact} vs sampled {mc}"))?;
        worst = worst.max(rel);
        ensure(closed_form_kl(q, q) == 0.0, || format!("instance {i}: nonzero KL for identical parameters"))?;
    }
    Ok(format!("50 instances, 1e6 draws, worst relative gap {:.4}%", 100.0 * worst))
}

// ---------------------------------------------------------------- criterion 3

fn tiny_task() -> TaskSpec {
    TaskSpec {
        vocab_in: 12,
        vocab_out: 10,
        n_phrases: 8,
        phrase_len: 2,
        max_nonzero: 3,
        min_len: 4,
        max_len: 8,
        n_train: 400,
        n_val: 20,
        n_test: 20,
        seed: 3,
    }
}

fn tiny_config(epochs: usize, steps: usize) -> RunConfig {
    let task = tiny_task();
    let mut cfg = RunConfig {
        model: ModelConfig {
            n_blocks: 2,
            prob_blocks: vec![1, 2],
            d_model: 8,
            d_ff: 16,
            d_z: 4,
            n_heads: 2,
            vocab_in: task.vocab_in,
            vocab_out: task.vocab_out,
            dropout: 0.1,
        },
        optim: OptimConfig { epochs, steps_per_epoch: steps, ..OptimConfig::default() },
        task,
        ..RunConfig::default()
    };
    cfg.train.batch_size = 8;
    cfg.train.val_samples = 10;
    cfg.train.val_realizations = 3;
    cfg
}

/// `kappa` only moves down, and moves exactly when the epoch ends with
/// `L_c < 0` and `lambda <= 1`, by `L_c`. Returns the number of updates.
fn check_annealing(t: &Trainer, kappa_init: f64) -> Result<usize, String> {
    let mut prev = kappa_init;
    let mut updates = 0;
    for row in &t.state().log {
        let should = row.constraint_lc < 0.0 && row.lambda <= 1.0;
        let expected = if should { prev + row.constraint_lc } else { prev };
        ensure(row.kappa == expected, || {
            format!("epoch {}: kappa {} after {prev}, L_c {}, lambda {}", row.epoch, row.kappa, row.constraint_lc, row.lambda)
        })?;
        ensure(row.kappa <= prev, || format!("epoch {}: kappa increased", row.epoch))?;
        updates += usize::from(should);
        prev = row.kappa;
    }
    Ok(updates)
}

fn criterion_3() -> Check {
    // Scripted: L_rec far above kappa, then far below.
    let mut s = GecoState::new(0.5);
    let mut trace = vec![s.lambda];
    for i in 0..600 {
        s.lambda_step(if i < 300 { 2.0 } else { 0.1 }, 1e-2);
        trace.push(s.lambda);
    }
    ensure(trace[1..=300].windows(2).all(|w| w[1] >= w[0]) && trace[300] > trace[0], || {
        "scripted: lambda did not rise while the constraint was violated".into()
    })?;
    let peak = trace.iter().cloned().fold(f64::MIN, f64::max);
    ensure(*trace.last().unwrap() < peak, || "scripted: lambda did not fall after".into())?;
    let scripted = format!("scripted 1 -> {peak:.2} -> {:.2}", trace.last().unwrap());

    // Real run: kappa well above the attainable reconstruction loss.
    let mut cfg = tiny_config(30, 100);
    cfg.model.d_model = 16;
    cfg.model.d_ff = 32;
    cfg.model.d_z = 8;
    cfg.train.kappa_init = 1.0;
    let task = build_task(&cfg.task).map_err(fail)?;
    let splits = generate_splits(&task);
    let mut t = Trainer::new(&cfg, &task, &splits.train, &splits.val).map_err(fail)?;
    let mut steps = Vec::new();
    while !t.is_done() {
        steps.push(t.step().map_err(fail)?);
    }
    let cross = steps
        .iter()
        .position(|st| st.ema_rec.unwrap() <= st.kappa)
        .ok_or_else(|| format!("real run: smoothed L_rec never reached kappa\n{}", t.log_csv()))?;
    ensure(cross > 1, || "real run: constraint satisfied from the start".into())?;
    ensure(steps[..cross].windows(2).all(|w| w[1].lambda >= w[0].lambda) && steps[cross - 1].lambda > 1.0, || {
        "real run: lambda did not rise while EMA(L_rec) > kappa".into()
    })?;
    let peak = steps.iter().map(|s| s.lambda).fold(f64::MIN, f64::max);
    let last = steps.last().unwrap().lambda;
    ensure(last < peak, || "real run: lambda did not fall after the constraint was met".into())?;
    let updates = check_annealing(&t, cfg.train.kappa_init)?;
    ensure(updates > 0, || "real run: annealing never triggered".into())?;

    let mut frozen = cfg.clone();
    frozen.train.kappa_init = 0.1;
    frozen.train.kappa_annealing = false;
    let mut f = Trainer::new(&frozen, &task, &splits.train, &splits.val).map_err(fail)?;
    f.run().map_err(fail)?;
    ensure(f.state().log.iter().all(|r| r.kappa == 0.1), || "kappa moved with annealing disabled".into())?;
    Ok(format!(
        "{scripted}; real run crosses at step {cross}, lambda peak {peak:.3} -> {last:.3}, {updates} kappa updates ({} -> {:.4}); frozen kappa stays 0.1",
        cfg.train.kappa_init,
        t.state().geco.kappa
    ))
}

// ---------------------------------------------------------------- criteria 4 and 7

const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const REALIZATIONS: usize = 50;

/// The desk preset's `kappa_init`, tuned on validation KL.
fn kappa_tuned() -> f64 {
    RunConfig::desk().train.kappa_init
}

struct Desk {
    cfg: RunConfig,
    task: SynthTask,
    splits: Splits,
}

fn desk() -> Result<Desk, String> {
    let cfg = RunConfig::desk();
    let task = build_task(&cfg.task).map_err(fail)?;
    let splits = generate_splits(&task);
    Ok(Desk { cfg, task, splits })
}

fn score(t: &Trainer, task: &SynthTask, test: &Dataset, method: Method, seed: u64) -> Result<MetricReport, String> {
    let model = t.best_model().map_err(fail)?;
    let e = run_inference(&model, task, test, method, REALIZATIONS, seed).map_err(fail)?;
    MetricReport::compute(&e).map_err(fail)
}

fn mean(reports: &[MetricReport]) -> MetricReport {
    MetricReport::mean_std(reports).0
}

fn criterion_4() -> Check {
    let d = desk()?;
    let (mut prob, mut dropout, mut softmax) = (Vec::new(), Vec::new(), Vec::new());
    for &seed in &DESK_SEEDS {
        let mut cfg = d.cfg.clone();
        cfg.train.seed = seed;
        cfg.train.model = ModelKind::Prob;
        let mut p = Trainer::new(&cfg, &d.task, &d.splits.train, &d.splits.val).map_err(fail)?;
        p.run().map_err(fail)?;
        prob.push(score(&p, &d.task, &d.splits.test, Method::ProbSample, seed)?);
        cfg.train.model = ModelKind::Vanilla;
        let mut v = Trainer::new(&cfg, &d.task, &d.splits.train, &d.splits.val).map_err(fail)?;
        v.run().map_err(fail)?;
        dropout.push(score(&v, &d.task, &d.splits.test, Method::McDropout, seed)?);
        softmax.push(score(&v, &d.task, &d.splits.test, Method::SoftmaxSample, seed)?);
        eprintln!(
            "  seed {seed}: prob {:?}\n          dropout {:?}\n          softmax {:?}",
            prob.last().unwrap(),
            dropout.last().unwrap(),
            softmax.last().unwrap()
        );
    }
    let (p, dr, sm) = (mean(&prob), mean(&dropout), mean(&softmax));
    let detail = format!(
        "validity prob {:.4} / dropout {:.4} / softmax {:.4}; KL prob {:.4} / dropout {:.4} / softmax {:.4}",
        p.validity, dr.validity, sm.validity, p.kl, dr.kl, sm.kl
    );
    let mut failures = Vec::new();
    if p.validity < dr.validity.max(sm.validity) - 0.02 {
        failures.push("prob validity more than 0.02 below the best baseline");
    }
    if p.kl > 0.5 * dr.kl.min(sm.kl) {
        failures.push("prob KL above half the best baseline KL");
    }
    if !(p.validity >= dr.validity && dr.validity >= sm.validity) {
        failures.push("validity ordering prob >= dropout >= softmax broken");
    }
    if failures.is_empty() { Ok(detail) } else { Err(format!("{detail}; {}", failures.join("; "))) }
}

/// Final validation KL with and without annealing for one setting. The two
/// runs coincide until the first epoch whose end meets the annealing
/// condition, so the annealed run resumes from the shared checkpoint there.
fn annealing_pair(d: &Desk, kappa: f64, seed: u64) -> Result<(f64, f64, Option<usize>), String> {
    let mut cfg = d.cfg.clone();
    cfg.train.seed = seed;
    cfg.train.kappa_init = kappa;
    cfg.train.kappa_annealing = false;
    let per_epoch = cfg.optim.steps_per_epoch as u64;
    let mut fixed = Trainer::new(&cfg, &d.task, &d.splits.train, &d.splits.val).map_err(fail)?;
    let mut snapshots = vec![fixed.checkpoint()];
    while !fixed.is_done() {
        let next = fixed.state().step + per_epoch;
        fixed.run_until(next).map_err(fail)?;
        snapshots.push(fixed.checkpoint());
    }
    let log = &fixed.state().log;
    let without = log.last().unwrap().val_metric;
    let Some(first) = log.iter().position(|r| r.constraint_lc < 0.0 && r.lambda <= 1.0) else {
        return Ok((without, without, None));
    };
    let mut annealed_cfg = cfg.clone();
    annealed_cfg.train.kappa_annealing = true;
    let mut branch: Container = snapshots.swap_remove(first);
    branch.config_json = annealed_cfg.to_json();
    let mut annealed =
        Trainer::resume(&annealed_cfg, &d.task, &d.splits.train, &d.splits.val, &branch).map_err(fail)?;
    annealed.run().map_err(fail)?;
    let with = annealed.state().log.last().unwrap().val_metric;
    Ok((with, without, Some(first + 1)))
}

fn criterion_7() -> Check {
    let d = desk()?;
    let mut lines = Vec::new();
    let mut ok = true;
    for factor in [2.0, 4.0] {
        let kappa = factor * kappa_tuned();
        let mut wins = 0;
        let mut runs = Vec::new();
        for &seed in &DESK_SEEDS {
            let (with, without, first) = annealing_pair(&d, kappa, seed)?;
            wins += usize::from(with <= without);
            let when = first.map_or("never annealed".to_string(), |e| format!("first anneal epoch {e}"));
            runs.push(format!("seed {seed} {with:.4} vs {without:.4} ({when})"));
            eprintln!("  kappa {kappa}: {}", runs.last().unwrap());
        }
        ok &= wins >= 2;
        lines.push(format!("kappa {kappa}: {wins}/3 [{}]", runs.join(", ")));
    }
    let detail = lines.join("; ");
    if ok { Ok(detail) } else { Err(detail) }
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Check {
    let d = desk()?;
    let test = d.splits.test.truncated(50);
    let exact = MetricReport::compute(&oracle_ensemble(&d.task, &test, 10_000, 5).map_err(fail)?).map_err(fail)?;
    ensure(exact.validity == 1.0, || format!("validity {}", exact.validity))?;
    ensure(exact.kl < 0.05, || format!("KL {}", exact.kl))?;
    ensure(exact.tv < 0.02, || format!("TV {}", exact.tv))?;
    ensure((0.95..=1.0).contains(&exact.diversity), || format!("diversity {}", exact.diversity))?;
    Ok(format!(
        "R=1e4 on {} test samples: validity {}, KL {:.4}, TV {:.4}, diversity {:.4}",
        test.len(),
        exact.validity,
        exact.kl,
        exact.tv,
        exact.diversity
    ))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Check {
    let mut base = RunConfig::desk().model;
    base.prob_blocks = vec![];
    let prob = PredictiveModel::<f32>::new(&base, 11).map_err(fail)?;
    let mut vcfg = base.clone();
    vcfg.prob_blocks = vec![1, 2];
    let vanilla = PredictiveModel::<f32>::new(&vcfg.vanilla(), 11).map_err(fail)?;
    ensure(prob.params() == vanilla.params(), || "parameters differ".into())?;
    let x = TokenBatch::from_rows(&[(0..20).map(|i| i * 3 % 64).collect::<Vec<u32>>(), (0..20).collect()])
        .map_err(fail)?;
    for mode in [Inference::Mean, Inference::Sample] {
        let a = prob.predict(&x, mode, 4).map_err(fail)?;
        let b = vanilla.predict(&x, mode, 4).map_err(fail)?;
        ensure(a.logits == b.logits, || format!("{mode:?} logits differ"))?;
    }

    let mut model = PredictiveModel::<f32>::new(&base, 12).map_err(fail)?;
    let mut rng = substream(6, "scramble", 0);
    for p in model.params_mut().iter_mut() {
        p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    let y: Vec<usize> = (0..40).map(|i| i * 7 % 64).collect();
    let grads = |geco: bool| -> Result<Vec<Vec<f32>>, String> {
        let mut g = Graph::<f32>::new();
        let p = model.params().bind(&mut g, true).map_err(fail)?;
        let mut drop_rng = substream(6, "dropout", 0);
        let out = model
            .forward(&mut g, &p, &x, LatentMode::Mean, &mut DropoutCtx::active(0.1, &mut drop_rng))
            .map_err(fail)?;
        let ce = reconstruction_loss(&mut g, out.logits, &y).map_err(fail)?;
        let loss = if geco {
            let kl = g.scalar(0.0);
            geco_loss(&mut g, ce, kl, &GecoState::new(0.0)).map_err(fail)?
        } else {
            ce
        };
        g.backward(loss).map_err(fail)?;
        Ok(p.vars().iter().map(|&v| g.grad(v).unwrap().to_vec()).collect())
    };
    ensure(grads(true)? == grads(false)?, || "GECO gradients differ from cross-entropy".into())?;
    Ok("M=0 and vanilla logits bit-identical in mean and sample mode; GECO(1, 0, 0) gradients equal CE".into())
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Check {
    let cfg = tiny_config(4, 50);
    let data = |spec: &TaskSpec| -> Result<(SynthTask, Splits), String> {
        let task = build_task(spec).map_err(fail)?;
        let splits = generate_splits(&task);
        Ok((task, splits))
    };
    let (task, s) = data(&cfg.task)?;
    let (task2, s2) = data(&cfg.task)?;
    ensure(task.to_json() == task2.to_json(), || "task files differ".into())?;
    for (a, b) in [(&s.train, &s2.train), (&s.val, &s2.val), (&s.test, &s2.test)] {
        ensure(dataset_to_string(a) == dataset_to_string(b), || "dataset files differ".into())?;
    }

    let trajectory = |t: &mut Trainer| -> Result<Vec<String>, String> {
        let mut out = Vec::new();
        while !t.is_done() {
            out.push(format!("{:?}", t.step().map_err(fail)?));
        }
        Ok(out)
    };
    let mut full = Trainer::new(&cfg, &task, &s.train, &s.val).map_err(fail)?;
    let full_steps = trajectory(&mut full)?;
    let mut again = Trainer::new(&cfg, &task2, &s2.train, &s2.val).map_err(fail)?;
    let again_steps = trajectory(&mut again)?;
    ensure(full_steps.len() == 200, || format!("{} steps", full_steps.len()))?;
    ensure(full_steps == again_steps && full.log_csv() == again.log_csv(), || "same seed, different logs".into())?;
    let ckpt = full.checkpoint().to_bytes();
    ensure(ckpt == again.checkpoint().to_bytes(), || "same seed, different checkpoints".into())?;

    let cut = 130;
    let mut first = Trainer::new(&cfg, &task, &s.train, &s.val).map_err(fail)?;
    first.run_until(cut).map_err(fail)?;
    let stored = Container::from_bytes(&first.checkpoint().to_bytes()).map_err(fail)?;
    let mut resumed = Trainer::resume(&cfg, &task, &s.train, &s.val, &stored).map_err(fail)?;
    let tail = trajectory(&mut resumed)?;
    ensure(tail == full_steps[cut as usize..], || "resumed steps differ".into())?;
    ensure(resumed.log_csv() == full.log_csv(), || "resumed log differs".into())?;
    ensure(resumed.checkpoint().to_bytes() == ckpt, || "resumed checkpoint differs".into())?;
    Ok(format!("datasets, 200-step logs and {}-byte checkpoints identical; resume at step {cut} bit-exact", ckpt.len()))
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Check {
    let dir = tempfile::TempDir::new().map_err(fail)?;
    let mut cfg = RunConfig::desk();
    cfg.model.n_blocks = 4;
    cfg.model.prob_blocks = (1..=4).collect();
    cfg.optim.epochs = 1;
    cfg.optim.steps_per_epoch = 40;
    cfg.train.val_samples = 20;
    let cfg_path = dir.path().join("n4.json");
    cfg.save(&cfg_path).map_err(fail)?;
    let data = dir.path().join("data");
    let out = dir.path().join("ablate");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let bin = env!("CARGO_BIN_EXE_probtrans");
    let run = |args: &[String]| -> Result<(), String> {
        let o = Command::new(bin).env("PROBTRANS_LOG", "warn").args(args).output().map_err(fail)?;
        ensure(o.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    };
    run(&["gen-data".into(), "--config".into(), s(&cfg_path), "--out".into(), s(&data)])?;
    let mut args: Vec<String> = vec!["ablate".into(), "--data".into(), s(&data), "--out".into(), s(&out)];
    for setting in ["middle", "2,3", "all"] {
        args.extend(["--prob-blocks".into(), setting.into()]);
    }
    args.extend(["--realizations", "5", "--seeds", "2", "--samples", "40"].map(String::from));
    run(&args)?;

    let expected = [("middle", vec![3]), ("blocks-2-3", vec![2, 3]), ("all", vec![1, 2, 3, 4])];
    for (label, blocks) in &expected {
        let run_dir = out.join(label);
        let used = RunConfig::load(&run_dir.join("config.json")).map_err(fail)?;
        ensure(used.model.prob_blocks == *blocks, || format!("{label}: prob blocks {:?}", used.model.prob_blocks))?;
        let c = Container::load(&run_dir.join("checkpoint.bin")).map_err(fail)?;
        let (_, model) = load_model(&c, false).map_err(fail)?;
        ensure(model.config().prob_blocks == *blocks, || format!("{label}: checkpoint model differs"))?;
        let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).map_err(fail)?;
        ensure(metrics.lines().next() == Some(CSV_HEADER), || format!("{label}: metrics header"))?;
    }
    let table = std::fs::read_to_string(out.join("ablation.csv")).map_err(fail)?;
    let mut lines = table.lines();
    ensure(lines.next() == Some(format!("prob_blocks,{CSV_HEADER}").as_str()), || "ablation header".into())?;
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    for (label, _) in &expected {
        let mine: Vec<&Vec<&str>> = rows.iter().filter(|r| r[0] == *label).collect();
        ensure(!mine.is_empty(), || format!("no rows for {label}"))?;
        for r in &mine {
            ensure(r.len() == CSV_HEADER.split(',').count() + 1, || format!("{label}: ragged row"))?;
            ensure(r[1] == "prob_sample", || format!("{label}: method {}", r[1]))?;
            ensure(r[3..].iter().all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)), || format!("{label}: bad metric"))?;
        }
    }
    let per = rows.len() / expected.len();
    ensure(rows.len() == per * expected.len(), || "settings have different row counts".into())?;
    Ok(format!("settings middle, 2,3 and all on N=4: {} rows of comparable metrics", rows.len()))
}

// ---------------------------------------------------------------- driver

struct Criterion {
    id: u32,
    name: &'static str,
    run: fn() -> Check,
    /// A failure changes the exit status.
    gating: bool,
}

const CRITERIA: [Criterion; 9] = [
    Criterion { id: 1, name: "gradient correctness", run: criterion_1, gating: true },
    Criterion { id: 2, name: "Gaussian KL oracle", run: criterion_2, gating: true },
    Criterion { id: 3, name: "GECO and kappa dynamics", run: criterion_3, gating: true },
    Criterion { id: 4, name: "desk-scale comparison with baselines", run: criterion_4, gating: false },
    Criterion { id: 5, name: "metric oracle", run: criterion_5, gating: true },
    Criterion { id: 6, name: "vanilla reduction", run: criterion_6, gating: true },
    Criterion { id: 7, name: "kappa annealing ablation", run: criterion_7, gating: false },
    Criterion { id: 8, name: "determinism and resume", run: criterion_8, gating: true },
    Criterion { id: 9, name: "prob-layer placement ablation", run: criterion_9, gating: true },
];

fn selected() -> Option<Vec<u32>> {
    let v = std::env::var("PROBTRANS_ACCEPTANCE").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let only = selected();
    let mut results = Vec::new();
    for c in CRITERIA.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        eprintln!("criterion {}: {} ...", c.id, c.name);
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        results.push((c, outcome, secs));
    }
    println!();
    let mut failed = false;
    for (c, outcome, secs) in &results {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let note = if outcome.is_err() && !c.gating { " (reported, not gating)" } else { "" };
        println!("criterion {} {tag}{note} [{:.0}s] {}: {detail}", c.id, secs, c.name);
        failed |= outcome.is_err() && c.gating;
    }
    if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS }
}
