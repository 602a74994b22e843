//! Finite-difference gradient checks for every graph operation and layer.

use probtrans::gradcheck::{check_inputs, check_stores, GradReport};
use probtrans::nn::{Block, DropoutCtx, FeedForward, LayerNorm, Linear, MultiHeadAttention, ProbLayer, ZSource};
use probtrans::params::ParamStore;
use probtrans::rng::{substream, StreamRng};
use probtrans::tensor::{Graph, Tensor, Var};
use probtrans::Result;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const H: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-4;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn uniform(rng: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// `sum(x * w)` with fixed random weights, so every output element matters.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = uniform(&mut substream(seed, "project", 0), &shape);
    let w = g.constant(&shape, w.data().to_vec())?;
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn assert_close(what: &str, r: &GradReport) {
    assert!(r.checked > 0, "{what}: nothing checked");
    assert!(r.max_rel_err < TOL, "{what}: max relative error {} at {:?}", r.max_rel_err, r.worst);
}

/// Random `[b, s, d]` with `s <= 4`, `d <= 8`.
fn dims(rng: &mut StreamRng) -> (usize, usize, usize) {
    (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=8))
}

fn for_instances(name: &str, mut f: impl FnMut(&mut StreamRng, u64) -> GradReport) {
    for i in 0..INSTANCES {
        let mut rng = substream(0, name, i);
        let r = f(&mut rng, i);
        assert_close(&format!("{name} #{i}"), &r);
    }
}

#[test]
fn elementwise_and_broadcast_ops() {
    for_instances("binary", |rng, i| {
        let (b, s, d) = dims(rng);
        let a = uniform(rng, &[b, s, d]);
        let c = uniform(rng, &[s, d]);
        check_inputs(&[a, c], H, FLOOR, |g, v| {
            let x = g.add(v[0], v[1])?;
            let y = g.sub(x, v[1])?;
            let y = g.sub(y, v[1])?;
            let z = g.mul(y, v[1])?;
            let z = g.scale(z, 0.7);
            let z = g.add_scalar(z, 0.3);
            let z = g.neg(z);
            project(g, z, i)
        })
        .unwrap()
    });
}

#[test]
fn unary_ops() {
    for_instances("unary", |rng, i| {
        let (b, s, d) = dims(rng);
        let a = uniform(rng, &[b, s, d]);
        check_inputs(&[a], H, FLOOR, |g, v| {
            let e = g.exp(v[0]);
            let l = g.log(e)?;
            let l = g.add_scalar(l, 0.0);
            let sq = g.mul(l, l)?;
            let pos = g.add_scalar(sq, 0.5);
            let lg = g.log(pos)?;
            let si = g.silu(v[0]);
            let t = g.add(lg, si)?;
            let t = g.add(t, e)?;
            project(g, t, i)
        })
        .unwrap()
    });
}

#[test]
fn softmax_on_every_axis() {
    for_instances("softmax", |rng, i| {
        let (b, s, d) = dims(rng);
        let a = uniform(rng, &[b, s, d]);
        let axis = rng.random_range(0..3);
        check_inputs(&[a], H, FLOOR, |g, v| {
            let y = g.softmax(v[0], axis)?;
            project(g, y, i)
        })
        .unwrap()
    });
}

#[test]
fn reductions() {
    for_instances("reduce", |rng, _| {
        let (b, s, d) = dims(rng);
        let a = uniform(rng, &[b, s, d]);
        check_inputs(&[a], H, FLOOR, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let s1 = g.sum(sq);
            let m = g.mean(v[0]);
            let m2 = g.mul(m, m)?;
            Ok(g.add(s1, m2)?)
        })
        .unwrap()
    });
}

#[test]
fn matmul_plain_and_batched() {
    for_instances("matmul", |rng, i| {
        let (b, s, d) = dims(rng);
        let n = rng.random_range(1..=5);
        let a = uniform(rng, &[b, s, d]);
        let w = uniform(rng, &[d, n]);
        let bw = uniform(rng, &[b, d, n]);
        check_inputs(&[a, w, bw], H, FLOOR, |g, v| {
            let x = g.matmul(v[0], v[1])?;
            let y = g.matmul(v[0], v[2])?;
            let z = g.add(x, y)?;
            project(g, z, i)
        })
        .unwrap()
    });
}

#[test]
fn shape_ops() {
    for_instances("shape", |rng, i| {
        let (b, s, d) = dims(rng);
        let a = uniform(rng, &[b, s, d, 2]);
        check_inputs(&[a], H, FLOOR, |g, v| {
            let t = g.transpose(v[0])?;
            let p = g.permute(t, &[2, 0, 3, 1])?;
            let r = g.reshape(p, &[d * b, 2 * s])?;
            let sq = g.mul(r, r)?;
            project(g, sq, i)
        })
        .unwrap()
    });
}

#[test]
fn layer_norm_and_embedding() {
    for_instances("norm", |rng, i| {
        let (b, s, d) = dims(rng);
        let d = d.max(2);
        let vocab = rng.random_range(2..=6);
        let ids: Vec<usize> = (0..b * s).map(|_| rng.random_range(0..vocab)).collect();
        let table = uniform(rng, &[vocab, d]);
        let gamma = uniform(rng, &[d]);
        let beta = uniform(rng, &[d]);
        check_inputs(&[table, gamma, beta], H, FLOOR, |g, v| {
            let x = g.embedding(v[0], &ids, &[b, s])?;
            let y = g.layer_norm(x, v[1], v[2], 1e-5)?;
            project(g, y, i)
        })
        .unwrap()
    });
}

#[test]
fn dropout_with_a_fixed_mask() {
    for_instances("dropout", |rng, i| {
        let (b, s, d) = dims(rng);
        let a = uniform(rng, &[b, s, d]);
        check_inputs(&[a], H, FLOOR, |g, v| {
            let mut mask_rng = substream(i, "mask", 0);
            let y = g.dropout(v[0], 0.3, &mut mask_rng)?;
            let y = g.mul(y, y)?;
            project(g, y, i)
        })
        .unwrap()
    });
}

#[test]
fn cross_entropy() {
    for_instances("ce", |rng, _| {
        let (b, s, _) = dims(rng);
        let vocab = rng.random_range(2..=8);
        let targets: Vec<usize> = (0..b * s).map(|_| rng.random_range(0..vocab)).collect();
        let logits = uniform(rng, &[b, s, vocab]);
        check_inputs(&[logits], H, FLOOR, |g, v| Ok(g.cross_entropy(v[0], &targets)?)).unwrap()
    });
}

/// Random store values instead of the zero-initialized output projections,
/// so that every path carries gradient.
fn randomize(store: &mut ParamStore<f64>, rng: &mut StreamRng) {
    for p in store.iter_mut() {
        p.data.iter_mut().for_each(|x| { let v: f64 = StandardNormal.sample(&mut *rng); *x = 0.5 * v });
    }
}

#[test]
fn layers() {
    for_instances("layers", |rng, i| {
        let (b, s, _) = dims(rng);
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
        randomize(&mut store, rng);
        let x = uniform(rng, &[b, s, d]);
        let eps_seed = rng.random::<u64>();
        check_stores(&[&store], H, FLOOR, |g, p| {
            let p = &p[0];
            let x = g.constant(&[b, s, d], x.data().to_vec())?;
            let h = lin.forward(g, p, x)?;
            let h = ln.forward(g, p, h)?;
            let mut drop_rng = substream(eps_seed, "drop", 0);
            let mut drop = DropoutCtx::active(0.2, &mut drop_rng);
            let a = attn.forward(g, p, h, &mut drop)?;
            let f = ff.forward(g, p, a)?;
            let mut noise = substream(eps_seed, "noise", 0);
            let out = prob.forward(g, p, f, ZSource::Sample(&mut noise))?;
            let a = project(g, out.y, i)?;
            let b = project(g, out.latent.log_var, i + 1)?;
            let c = project(g, out.latent.mu, i + 2)?;
            let ab = g.add(a, b)?;
            Ok(g.add(ab, c)?)
        })
        .unwrap()
    });
}

#[test]
fn prob_block_with_injected_latent() {
    for_instances("block", |rng, i| {
        let (b, s, _) = dims(rng);
        let d = 4;
        let d_z = rng.random_range(1..=4);
        let mut store = ParamStore::<f64>::new(i);
        let block = Block::new(&mut store, "blk", d, 6, 2, Some(d_z));
        let mut zs = ParamStore::<f64>::new(i);
        zs.add("z", &[b, s, d_z], probtrans::params::Init::Zeros);
        randomize(&mut store, rng);
        randomize(&mut zs, rng);
        let x = uniform(rng, &[b, s, d]);
        check_stores(&[&store, &zs], H, FLOOR, |g, p| {
            let x = g.constant(&[b, s, d], x.data().to_vec())?;
            let z = p[1].vars()[0];
            let mut drop = DropoutCtx::inactive();
            let out = block.forward(g, &p[0], x, ZSource::Injected(z), &mut drop)?;
            project(g, out.y, i)
        })
        .unwrap()
    });
}
