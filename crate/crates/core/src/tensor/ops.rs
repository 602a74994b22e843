use rand::Rng;

use super::{gemm, numel, Graph, MatRef, Node, Result, Scalar, Tensor, TensorError, Var};

pub(super) enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Silu { input: Var, sig: Vec<F> },
    Softmax { input: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Permute { input: Var, axes: Vec<usize> },
    LayerNorm { input: Var, gamma: Var, beta: Var, mean: Vec<F>, rstd: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { input: Var, mask: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
}

impl<F: Scalar> Op<F> {
    pub(super) fn inputs(&self) -> [Option<Var>; 3] {
        use Op::*;
        match self {
            Leaf => [None, None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => [Some(*a), Some(*b), None],
            Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Sum(a) | Mean(a)
            | Transpose(a) | Reshape(a) => [Some(*a), None, None],
            Softmax { input, .. } | Permute { input, .. } | Dropout { input, .. } | Silu { input, .. } => {
                [Some(*input), None, None]
            }
            LayerNorm { input, gamma, beta, .. } => [Some(*input), Some(*gamma), Some(*beta)],
            Embedding { table, .. } => [Some(*table), None, None],
            CrossEntropy { logits, .. } => [Some(*logits), None, None],
        }
    }
}

/// `b` broadcasts against `a` when its shape is a trailing suffix of `a`'s.
fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn last_two(shape: &[usize]) -> (usize, usize) {
    let n = shape.len();
    (shape[n - 2], shape[n - 1])
}

impl<F: Scalar> Graph<F> {
    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if suffix_broadcast(sa, sb) {
            Ok(())
        } else {
            Err(TensorError::Shape { op, lhs: sa.to_vec(), rhs: sb.to_vec() })
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Vec<F> {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(va.len());
        for chunk in va.chunks(vb.len().max(1)) {
            out.extend(chunk.iter().zip(vb).map(|(&x, &y)| f(x, y)));
        }
        out
    }

    /// `a + b`, with `b` broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let data = self.zip_broadcast(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let data = self.zip_broadcast(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let data = self.zip_broadcast(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let data = self.value(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let data = self.value(a).iter().map(|&x| x + c).collect();
        self.push(self.shape(a).to_vec(), data, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|x| x.exp_fast()).collect();
        self.push(self.shape(a).to_vec(), data, Op::Exp(a))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|x| !(**x > F::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        let data = self.value(a).iter().map(|x| x.ln()).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Log(a)))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let sig: Vec<F> = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let data = self.value(a).iter().zip(&sig).map(|(&x, &s)| x * s).collect();
        self.push(self.shape(a).to_vec(), data, Op::Silu { input: a, sig })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a);
        let mut y = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = F::neg_infinity();
                for j in 0..n {
                    max = max.max(x[base + j * inner]);
                }
                let mut sum = F::zero();
                for j in 0..n {
                    let e = (x[base + j * inner] - max).exp_fast();
                    y[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..n {
                    y[base + j * inner] = y[base + j * inner] / sum;
                }
            }
        }
        Ok(self.push(shape, y, Op::Softmax { input: a, axis }))
    }

    /// Sum of all elements (64-bit accumulation).
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|x| x.as_f64()).sum();
        self.push(vec![], vec![F::of(s)], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.iter().map(|x| x.as_f64()).sum();
        let m = s / v.len().max(1) as f64;
        self.push(vec![], vec![F::of(m)], Op::Mean(a))
    }

    /// Batched matrix product `[.., m, k] x [k, n]` or `[.., m, k] x [.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || TensorError::Shape { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = last_two(&sa);
        let (k2, n) = last_two(&sb);
        if k != k2 {
            return Err(err());
        }
        let batch = &sa[..sa.len() - 2];
        if sb.len() != 2 && sb[..sb.len() - 2] != *batch {
            return Err(err());
        }
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![F::zero(); numel(&out_shape)];
        if sb.len() == 2 {
            let rows = numel(batch) * m;
            gemm(MatRef::new(va, rows, k), MatRef::new(vb, k, n), F::zero(), &mut out);
        } else {
            for bi in 0..numel(batch) {
                gemm(
                    MatRef::new(&va[bi * m * k..(bi + 1) * m * k], m, k),
                    MatRef::new(&vb[bi * k * n..(bi + 1) * k * n], k, n),
                    F::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        Ok(self.push(out_shape, out, Op::MatMul(a, b)))
    }

    /// Swap the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Shape { op: "transpose", lhs: shape, rhs: vec![] });
        }
        let (r, c) = last_two(&shape);
        let x = self.value(a);
        let mut y = vec![F::zero(); x.len()];
        for (bx, by) in x.chunks(r * c).zip(y.chunks_mut(r * c)) {
            transpose_into(bx, r, c, by);
        }
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape.swap(n - 1, n - 2);
        Ok(self.push(out_shape, y, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.tensor(a).numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a)))
    }

    /// Reorder dimensions: output dim `i` is input dim `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&ax| ax < shape.len() && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(TensorError::Shape { op: "permute", lhs: shape, rhs: axes.to_vec() });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let x = self.value(a);
        let mut y = vec![F::zero(); x.len()];
        permute_walk(&shape, axes, |src, dst, len| {
            y[dst..dst + len].copy_from_slice(&x[src..src + len]);
        });
        Ok(self.push(out_shape, y, Op::Permute { input: a, axes: axes.to_vec() }))
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta` of shape `[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::Contract("layer_norm on scalar".into()))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut y = vec![F::zero(); xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            let (mean, rstd) = (F::of(mean), F::of(rstd));
            for j in 0..d {
                y[r * d + j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        Ok(self.push(shape, y, Op::LayerNorm { input: x, gamma, beta, mean: means, rstd: rstds }))
    }

    /// Gather rows of a `[V, D]` table; output shape is `prefix ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || numel(prefix) != ids.len() {
            return Err(TensorError::Shape { op: "embedding", lhs: ts, rhs: prefix.to_vec() });
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(bad) = ids.iter().find(|&&id| id >= v) {
            return Err(TensorError::Domain {
                op: "embedding",
                msg: format!("token id {bad} out of range for vocabulary of {v}"),
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        Ok(self.push(shape, out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Inverted dropout: zero each element with probability `rate`, scale survivors by
    /// `1/(1-rate)`. The mask is stored on the tape. `rate == 0` is the identity and
    /// draws nothing from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Domain { op: "dropout", msg: format!("rate {rate}") });
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.tensor(a).numel())
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let data = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Dropout { input: a, mask }))
    }

    /// Mean token cross-entropy of `[.., V]` logits against one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().unwrap_or(&0);
        let rows = numel(&shape) / v.max(1);
        if v == 0 || rows != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Domain {
                op: "cross_entropy",
                msg: format!("target {bad} out of range for {v} classes"),
            });
        }
        let x = self.value(logits);
        let mut probs = vec![F::zero(); x.len()];
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, z| m.max(z.as_f64()));
            let sum: f64 = row.iter().map(|z| (z.as_f64() - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..v {
                probs[r * v + j] = F::of((row[j].as_f64() - lse).exp());
            }
            total += lse - row[targets[r]].as_f64();
        }
        let loss = F::of(total / rows as f64);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        ))
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp_fast())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn transpose_into<F: Copy>(x: &[F], r: usize, c: usize, y: &mut [F]) {
    for i in 0..r {
        for j in 0..c {
            y[j * r + i] = x[i * c + j];
        }
    }
}

/// Visit contiguous runs of a permutation: `f(src_offset, dst_offset, run_len)`.
fn permute_walk(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = shape.len();
    if numel(shape) == 0 {
        return;
    }
    if nd == 0 {
        f(0, 0, 1);
        return;
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // Innermost output dim maps to a contiguous input run only if it is the input's last dim.
    let run = if axes[nd - 1] == nd - 1 { out_shape[nd - 1] } else { 1 };
    let outer_dims = if run > 1 { nd - 1 } else { nd };
    let mut idx = vec![0usize; outer_dims];
    let mut dst = 0;
    loop {
        let src: usize = (0..outer_dims).map(|i| idx[i] * in_strides[axes[i]]).sum();
        f(src, dst, run);
        dst += run;
        let mut d = outer_dims;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn slot<'g, F: Scalar>(
    nodes: &[Node<F>],
    grads: &'g mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'g mut Vec<F>> {
    let t = &nodes[v.0].tensor;
    if !t.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); t.numel()]))
}

/// Add `src` elementwise into the gradient of `v`, taking it over as-is when
/// nothing has been accumulated yet.
fn accumulate<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    v: Var,
    src: impl Iterator<Item = F>,
) {
    if !nodes[v.0].tensor.requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, x)| *d = *d + x),
        empty => *empty = Some(src.collect()),
    }
}

/// Reduce an `a`-shaped gradient onto a suffix-broadcast operand.
fn accumulate_broadcast<F: Scalar>(dst: &mut [F], src: impl Iterator<Item = F>) {
    let n = dst.len();
    for (i, g) in src.enumerate() {
        dst[i % n] = dst[i % n] + g;
    }
}

impl<F: Scalar> Op<F> {
    /// Push `g` (gradient w.r.t. `out`) into the gradients of this op's inputs.
    pub(super) fn backward(
        &self,
        nodes: &[Node<F>],
        out: &Tensor<F>,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let val = |v: Var| nodes[v.0].tensor.data.as_slice();
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self, Op::Sub(..)) { -F::one() } else { F::one() };
                accumulate(nodes, grads, *a, g.iter().copied());
                if nodes[b.0].tensor.numel() == g.len() {
                    accumulate(nodes, grads, *b, g.iter().map(|&x| x * sign));
                } else if let Some(db) = slot(nodes, grads, *b) {
                    accumulate_broadcast(db, g.iter().map(|&x| x * sign));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let nb = vb.len();
                accumulate(nodes, grads, *a, g.iter().enumerate().map(|(i, &x)| x * vb[i % nb]));
                if nb == g.len() {
                    accumulate(nodes, grads, *b, g.iter().zip(va).map(|(&x, &y)| x * y));
                } else if let Some(db) = slot(nodes, grads, *b) {
                    accumulate_broadcast(db, g.iter().zip(va).map(|(&x, &y)| x * y));
                }
            }
            Op::Scale(a, c) => {
                accumulate(nodes, grads, *a, g.iter().map(|&x| x * *c));
            }
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, g.iter().copied()),
            Op::Exp(a) => accumulate(nodes, grads, *a, g.iter().zip(&out.data).map(|(&x, &y)| x * y)),
            Op::Log(a) => accumulate(nodes, grads, *a, g.iter().zip(val(*a)).map(|(&x, &y)| x / y)),
            Op::Silu { input, sig } => {
                let grad = g.iter().zip(val(*input)).zip(sig);
                accumulate(nodes, grads, *input, grad.map(|((&x, &z), &s)| x * s * (F::one() + z * (F::one() - s))));
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = split_axis(&out.shape, *axis);
                let y = &out.data;
                if let Some(da) = slot(nodes, grads, *input) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let mut dot = F::zero();
                            for j in 0..n {
                                dot = dot + g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..n {
                                let k = base + j * inner;
                                da[k] = da[k] + y[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = nodes[a.0].tensor.numel();
                let scale = if matches!(self, Op::Mean(_)) { F::of(1.0 / n as f64) } else { F::one() };
                if let Some(da) = slot(nodes, grads, *a) {
                    let x = g[0] * scale;
                    da.iter_mut().for_each(|d| *d = *d + x);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].tensor.shape, &nodes[b.0].tensor.shape);
                let (m, k) = last_two(sa);
                let n = sb[sb.len() - 1];
                let (va, vb) = (val(*a), val(*b));
                let batch = numel(&sa[..sa.len() - 2]);
                if sb.len() == 2 {
                    let rows = batch * m;
                    if let Some(da) = slot(nodes, grads, *a) {
                        gemm(MatRef::new(g, rows, n), MatRef::t(vb, k, n), F::one(), da);
                    }
                    if let Some(db) = slot(nodes, grads, *b) {
                        gemm(MatRef::t(va, rows, k), MatRef::new(g, rows, n), F::one(), db);
                    }
                } else {
                    if let Some(da) = slot(nodes, grads, *a) {
                        for bi in 0..batch {
                            gemm(
                                MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                                MatRef::t(&vb[bi * k * n..(bi + 1) * k * n], k, n),
                                F::one(),
                                &mut da[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    }
                    if let Some(db) = slot(nodes, grads, *b) {
                        for bi in 0..batch {
                            gemm(
                                MatRef::t(&va[bi * m * k..(bi + 1) * m * k], m, k),
                                MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                                F::one(),
                                &mut db[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                // out is [.., c, r]; its transpose is the input layout [.., r, c].
                let (c, r) = last_two(&out.shape);
                if let Some(da) = slot(nodes, grads, *a) {
                    let mut tmp = vec![F::zero(); r * c];
                    for (gb, db) in g.chunks(r * c).zip(da.chunks_mut(r * c)) {
                        transpose_into(gb, c, r, &mut tmp);
                        db.iter_mut().zip(&tmp).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::Permute { input, axes } => {
                let in_shape = nodes[input.0].tensor.shape.clone();
                if let Some(da) = slot(nodes, grads, *input) {
                    permute_walk(&in_shape, axes, |src, dst, len| {
                        for i in 0..len {
                            da[src + i] = da[src + i] + g[dst + i];
                        }
                    });
                }
            }
            Op::LayerNorm { input, gamma, beta, mean, rstd } => {
                let d = *out.shape.last().unwrap();
                let x = val(*input);
                let gv = val(*gamma);
                let rows = x.len() / d;
                let xhat = |r: usize, j: usize| (x[r * d + j] - mean[r]) * rstd[r];
                if let Some(dg) = slot(nodes, grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + g[r * d + j] * xhat(r, j);
                        }
                    }
                }
                if let Some(dbeta) = slot(nodes, grads, *beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            dbeta[j] = dbeta[j] + g[r * d + j];
                        }
                    }
                }
                if let Some(dx) = slot(nodes, grads, *input) {
                    let inv_d = F::of(1.0 / d as f64);
                    for r in 0..rows {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xhat(r, j);
                        }
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            let v = rstd[r] * (dxh - s1 * inv_d - xhat(r, j) * s2 * inv_d);
                            dx[r * d + j] = dx[r * d + j] + v;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].tensor.shape[1];
                if let Some(dt) = slot(nodes, grads, *table) {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] = dt[id * d + j] + g[row * d + j];
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                accumulate(nodes, grads, *input, g.iter().zip(mask).map(|(&x, &m)| x * m));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let rows = targets.len();
                let v = probs.len() / rows;
                let scale = g[0] * F::of(1.0 / rows as f64);
                if let Some(dl) = slot(nodes, grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let k = r * v + j;
                            let ind = if j == t { F::one() } else { F::zero() };
                            dl[k] = dl[k] + (probs[k] - ind) * scale;
                        }
                    }
                }
            }
        }
    }
}
