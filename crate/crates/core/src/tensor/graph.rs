use std::borrow::Cow;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Whether stochastic layers (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Invocation counters maintained by the model layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub encoder_passes: usize,
    pub decoder_passes: usize,
    pub length_predictions: usize,
}

pub(crate) enum Op<S> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Softplus(Var),
    ClampMin(Var, S),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    MatMul {
        a: Var,
        b: Var,
        batched: bool,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Mean(Var),
    Sum(Var),
    Transpose {
        x: Var,
        axes: (usize, usize),
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<S>,
        smoothing: S,
        probs: Vec<S>,
    },
}

struct Node<'p, S: Scalar> {
    value: Cow<'p, Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Define-by-run computation graph.
///
/// Parameter leaves borrow their values from the [`ParamStore`] without
/// copying; each parameter appears at most once per graph so repeated uses
/// accumulate into a single gradient.
pub struct Graph<'p, S: Scalar> {
    store: Option<&'p ParamStore<S>>,
    nodes: Vec<Node<'p, S>>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    pub counters: Counters,
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(0),
            counters: Counters::default(),
        }
    }

    pub fn with_params(store: &'p ParamStore<S>, mode: Mode) -> Self {
        Graph {
            store: Some(store),
            ..Self::new(mode)
        }
    }

    /// Seeds the dropout stream.
    pub fn seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// A differentiable leaf that is not backed by the parameter store.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("Graph::param called on a graph built without a parameter store");
        self.nodes.push(Node {
            value: Cow::Borrowed(store.value(id)),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    // ── elementwise ─────────────────────────────────────────────────────

    /// `b` must equal `a` in shape or be a suffix of it (leading-batch expansion).
    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        self.check_suffix(name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len();
        let out: Vec<S> = da
            .chunks_exact(nb)
            .flat_map(|chunk| chunk.iter().zip(db).map(|(&x, &y)| f(x, y)))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > S::zero() { v } else { S::zero() }, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn clamp_min(&mut self, x: Var, floor: S) -> Var {
        self.unary(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    /// Inverted dropout; identity in [`Mode::Eval`] or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = S::of(1.0 / keep);
        let shape = self.shape(x).to_vec();
        let numel = self.value(x).numel();
        let mask: Vec<S> = (0..numel)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    scale
                } else {
                    S::zero()
                }
            })
            .collect();
        let m = self.constant(Tensor::from_parts(shape, mask));
        self.mul(x, m)
    }

    // ── reductions and normalization ────────────────────────────────────

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis; `mask[i] == true` marks a disallowed
    /// position, which receives exactly zero weight. A row with every
    /// position masked is an error.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(Error::shape(
                    "softmax",
                    format!("mask has {} entries for shape {:?}", m.len(), t.shape()),
                ));
            }
        }
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_exact_mut(n).enumerate() {
            let allowed = |j: usize| mask.map_or(true, |m| !m[r * n + j]);
            let mut max = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == S::neg_infinity() {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let mut sum = S::zero();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if allowed(j) { (*v - max).exp() } else { S::zero() };
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape(
                "layer-norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        let nf = S::of(n as f64);
        let mut xhat = Vec::with_capacity(xd.len());
        let mut rstd = Vec::with_capacity(xd.len() / n);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(n) {
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let r = S::one() / (var + S::of(eps)).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gd[j] + bd[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<S>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().copied().sum::<S>() / S::of(d.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Weighted cross-entropy summed over rows of `logits` (last axis = classes).
    ///
    /// Row `r` contributes `weights[r] * CE(softmax(logits_r), target_r)`, where
    /// the target distribution puts `1 - smoothing` on the gold class and
    /// spreads `smoothing` uniformly. Rows with zero weight are skipped and
    /// may carry any target.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[S],
        smoothing: f64,
    ) -> Result<Var> {
        let t = self.value(logits);
        let v = t.last_dim();
        let rows = t.numel() / v;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape(
                "cross-entropy",
                format!(
                    "{rows} rows but {} targets / {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let eps = S::of(smoothing);
        let uniform = eps / S::of(v as f64);
        let logits_data = t.data();
        let mut probs = logits_data.to_vec();
        let mut total = S::zero();
        for (r, row) in probs.chunks_exact_mut(v).enumerate() {
            let raw = &logits_data[r * v..(r + 1) * v];
            let max = raw.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                sum += *p;
            }
            let log_norm = max + sum.ln();
            let w = weights[r];
            if w != S::zero() {
                let tgt = targets[r];
                if tgt >= v {
                    return Err(Error::invalid(format!("target {tgt} outside {v} classes")));
                }
                let mut nll = -(S::one() - eps) * (raw[tgt] - log_norm);
                if smoothing > 0.0 {
                    let acc: S = raw.iter().map(|&l| l - log_norm).sum();
                    nll -= uniform * acc;
                }
                total += w * nll;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing: eps,
                probs,
            },
            &[logits],
        ))
    }

    // ── linear algebra and layout ───────────────────────────────────────

    /// `a [.., M, K] x b [K, N]`, or a batched product when both operands have
    /// rank >= 3 with identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.is_empty() || sb.len() < 2 {
            return Err(bad());
        }
        let k = *sa.last().unwrap();
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(bad());
            }
            let n = sb[1];
            let rows = self.value(a).numel() / k;
            let mut out = vec![S::zero(); rows * n];
            S::gemm(
                rows,
                k,
                n,
                S::one(),
                self.data(a),
                (k, 1),
                self.data(b),
                (n, 1),
                S::zero(),
                &mut out,
                (n, 1),
            );
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            return Ok(self.push(
                Tensor::from_parts(shape, out),
                Op::MatMul {
                    a,
                    b,
                    batched: false,
                },
                &[a, b],
            ));
        }
        let r = sa.len();
        if r != sb.len() || sa[..r - 2] != sb[..r - 2] || sb[r - 2] != k {
            return Err(bad());
        }
        let (m, n) = (sa[r - 2], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![S::zero(); batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            S::gemm(
                m,
                k,
                n,
                S::one(),
                &da[i * m * k..(i + 1) * m * k],
                (k, 1),
                &db[i * k * n..(i + 1) * k * n],
                (n, 1),
                S::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        let mut shape = sa[..r - 1].to_vec();
        shape.push(n);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                batched: true,
            },
            &[a, b],
        ))
    }

    /// Gathers rows of `table [V, D]`; output shape is `ids_shape + [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], ids_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::shape("embedding-lookup", format!("table {st:?}")));
        }
        if ids_shape.iter().product::<usize>() != ids.len() || ids.is_empty() {
            return Err(Error::shape(
                "embedding-lookup",
                format!("{} ids for shape {ids_shape:?}", ids.len()),
            ));
        }
        let (vocab, d) = (st[0], st[1]);
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        let mut idx = Vec::with_capacity(ids.len());
        for &id in ids {
            let i = id as usize;
            if i >= vocab {
                return Err(Error::OutOfVocabulary { id, vocab });
            }
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
            idx.push(i);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Embedding { table, ids: idx },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", t.shape())));
        }
        let data = t.data().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Reshape(x),
            &[x],
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a1: usize, a2: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if a1 >= shape.len() || a2 >= shape.len() {
            return Err(Error::shape(
                "transpose",
                format!("axes ({a1}, {a2}) on {shape:?}"),
            ));
        }
        let (lo, hi) = (a1.min(a2), a1.max(a2));
        let out = swap_axes(self.data(x), &shape, lo, hi);
        let mut out_shape = shape;
        out_shape.swap(lo, hi);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Transpose { x, axes: (lo, hi) },
            &[x],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or(Error::Empty("concat inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let pre: usize = first[..axis].iter().product();
        let post: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(pre * total * post);
        for p in 0..pre {
            for &v in inputs {
                let d = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[p * d * post..(p + 1) * d * post]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let pre: usize = shape[..axis].iter().product();
        let post: usize = shape[axis + 1..].iter().product();
        let d = shape[axis];
        let data = self.data(x);
        let mut out = Vec::with_capacity(pre * (end - start) * post);
        for p in 0..pre {
            out.extend_from_slice(&data[(p * d + start) * post..(p * d + end) * post]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Slice { x, axis, start },
            &[x],
        ))
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients accumulate additively when a node feeds several consumers.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .filter_map(|(&pid, &v)| grads[v.0].as_ref().map(|_| (pid, v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node<'p, S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let out = node.value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                accumulate(grads, self, *a, |dst| add_into(dst, g));
                if needs(*b) {
                    accumulate(grads, self, *b, |dst| reduce_into(dst, g, |gi, _| gi));
                }
            }
            Op::Sub(a, b) => {
                accumulate(grads, self, *a, |dst| add_into(dst, g));
                if needs(*b) {
                    accumulate(grads, self, *b, |dst| reduce_into(dst, g, |gi, _| -gi));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                if needs(*a) {
                    accumulate(grads, self, *a, |dst| {
                        for (i, d) in dst.iter_mut().enumerate() {
                            *d += g[i] * db[i % nb];
                        }
                    });
                }
                if needs(*b) {
                    accumulate(grads, self, *b, |dst| reduce_into(dst, g, |gi, i| gi * da[i]));
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                if needs(*a) {
                    accumulate(grads, self, *a, |dst| {
                        for (i, d) in dst.iter_mut().enumerate() {
                            *d += g[i] / db[i % nb];
                        }
                    });
                }
                if needs(*b) {
                    accumulate(grads, self, *b, |dst| {
                        reduce_into(dst, g, |gi, i| {
                            let y = db[i % nb];
                            -gi * da[i] / (y * y)
                        })
                    });
                }
            }
            Op::Scale(x, c) => accumulate(grads, self, *x, |dst| {
                for (d, &gi) in dst.iter_mut().zip(g) {
                    *d += gi * *c;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, self, *x, |dst| add_into(dst, g)),
            Op::Exp(x) => elementwise_grad(grads, self, *x, g, |i, _| out[i]),
            Op::Log(x) => elementwise_grad(grads, self, *x, g, |_, xv| S::one() / xv),
            Op::Sqrt(x) => elementwise_grad(grads, self, *x, g, |i, _| S::of(0.5) / out[i]),
            Op::Relu(x) => elementwise_grad(grads, self, *x, g, |_, xv| {
                if xv > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }),
            Op::Softplus(x) => elementwise_grad(grads, self, *x, g, |_, xv| sigmoid(xv)),
            Op::ClampMin(x, floor) => elementwise_grad(grads, self, *x, g, |_, xv| {
                if xv < *floor {
                    S::zero()
                } else {
                    S::one()
                }
            }),
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                accumulate(grads, self, *x, |dst| {
                    for ((drow, grow), yrow) in dst
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.chunks_exact(n))
                    {
                        let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.last_dim();
                let gd = self.data(*gain);
                if needs(*x) {
                    let nf = S::of(n as f64);
                    accumulate(grads, self, *x, |dst| {
                        for (r, drow) in dst.chunks_exact_mut(n).enumerate() {
                            let grow = &g[r * n..(r + 1) * n];
                            let hrow = &xhat[r * n..(r + 1) * n];
                            let mut mean_dh = S::zero();
                            let mut mean_dh_h = S::zero();
                            for j in 0..n {
                                let dh = grow[j] * gd[j];
                                mean_dh += dh;
                                mean_dh_h += dh * hrow[j];
                            }
                            mean_dh /= nf;
                            mean_dh_h /= nf;
                            for j in 0..n {
                                let dh = grow[j] * gd[j];
                                drow[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                            }
                        }
                    });
                }
                if needs(*gain) {
                    accumulate(grads, self, *gain, |dst| {
                        for (i, &gi) in g.iter().enumerate() {
                            dst[i % n] += gi * xhat[i];
                        }
                    });
                }
                if needs(*bias) {
                    accumulate(grads, self, *bias, |dst| {
                        for (i, &gi) in g.iter().enumerate() {
                            dst[i % n] += gi;
                        }
                    });
                }
            }
            Op::MatMul { a, b, batched } => self.matmul_backward(*a, *b, *batched, g, grads),
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                accumulate(grads, self, *table, |dst| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dst[id * d + j] += g[row * d + j];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let pre: usize = shape[..*axis].iter().product();
                let post: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let d = self.shape(v)[*axis];
                    if needs(v) {
                        accumulate(grads, self, v, |dst| {
                            for p in 0..pre {
                                let src = &g[(p * total + offset) * post..(p * total + offset + d) * post];
                                add_into(&mut dst[p * d * post..(p + 1) * d * post], src);
                            }
                        });
                    }
                    offset += d;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let pre: usize = in_shape[..*axis].iter().product();
                let post: usize = in_shape[*axis + 1..].iter().product();
                let d = in_shape[*axis];
                let len = node.value.shape()[*axis];
                accumulate(grads, self, *x, |dst| {
                    for p in 0..pre {
                        let src = &g[p * len * post..(p + 1) * len * post];
                        add_into(&mut dst[(p * d + start) * post..(p * d + start + len) * post], src);
                    }
                });
            }
            Op::Sum(x) => accumulate(grads, self, *x, |dst| {
                for d in dst.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = S::of(self.value(*x).numel() as f64);
                accumulate(grads, self, *x, |dst| {
                    for d in dst.iter_mut() {
                        *d += g[0] / n;
                    }
                })
            }
            Op::Transpose { x, axes } => {
                let back = swap_axes(g, node.value.shape(), axes.0, axes.1);
                accumulate(grads, self, *x, |dst| add_into(dst, &back));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                smoothing,
                probs,
            } => {
                let v = self.value(*logits).last_dim();
                let uniform = *smoothing / S::of(v as f64);
                accumulate(grads, self, *logits, |dst| {
                    for (r, drow) in dst.chunks_exact_mut(v).enumerate() {
                        let w = weights[r] * g[0];
                        if w == S::zero() {
                            continue;
                        }
                        let prow = &probs[r * v..(r + 1) * v];
                        for j in 0..v {
                            let mut target = uniform;
                            if j == targets[r] {
                                target += S::one() - *smoothing;
                            }
                            drow[j] += w * (prow[j] - target);
                        }
                    }
                });
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, batched: bool, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (da, db) = (self.data(a), self.data(b));
        let k = *sa.last().unwrap();
        let n = *sb.last().unwrap();
        let needs_a = self.nodes[a.0].needs_grad;
        let needs_b = self.nodes[b.0].needs_grad;
        if !batched {
            let rows = da.len() / k;
            if needs_a {
                // dA = dC B^T
                accumulate(grads, self, a, |dst| {
                    S::gemm(rows, n, k, S::one(), g, (n, 1), db, (1, n), S::one(), dst, (k, 1))
                });
            }
            if needs_b {
                // dB = A^T dC
                accumulate(grads, self, b, |dst| {
                    S::gemm(k, rows, n, S::one(), da, (1, k), g, (n, 1), S::one(), dst, (n, 1))
                });
            }
            return;
        }
        let r = sa.len();
        let m = sa[r - 2];
        let batch: usize = sa[..r - 2].iter().product();
        if needs_a {
            accumulate(grads, self, a, |dst| {
                for i in 0..batch {
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        &g[i * m * n..(i + 1) * m * n],
                        (n, 1),
                        &db[i * k * n..(i + 1) * k * n],
                        (1, n),
                        S::one(),
                        &mut dst[i * m * k..(i + 1) * m * k],
                        (k, 1),
                    );
                }
            });
        }
        if needs_b {
            accumulate(grads, self, b, |dst| {
                for i in 0..batch {
                    S::gemm(
                        k,
                        m,
                        n,
                        S::one(),
                        &da[i * m * k..(i + 1) * m * k],
                        (1, k),
                        &g[i * m * n..(i + 1) * m * n],
                        (n, 1),
                        S::one(),
                        &mut dst[i * k * n..(i + 1) * k * n],
                        (n, 1),
                    );
                }
            });
        }
    }
}

/// Per-node gradients from one reverse sweep.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    params: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf reached from the loss, ordered by id.
    pub fn params(&self) -> Vec<(ParamId, &[S])> {
        let mut out: Vec<(ParamId, &[S])> = self
            .params
            .iter()
            .filter_map(|&(pid, v)| self.wrt(v).map(|g| (pid, g)))
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<S>) -> Result<()> {
        for (pid, g) in self.params() {
            store.accumulate_grad(pid, g)?;
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    graph: &Graph<'_, S>,
    v: Var,
    f: impl FnOnce(&mut [S]),
) {
    if !graph.nodes[v.0].needs_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); graph.nodes[v.0].value.numel()]);
    f(buf);
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sums an output-shaped gradient into a suffix-shaped buffer.
fn reduce_into<S: Scalar>(dst: &mut [S], g: &[S], f: impl Fn(S, usize) -> S) {
    let nb = dst.len();
    for (i, &gi) in g.iter().enumerate() {
        dst[i % nb] += f(gi, i);
    }
}

fn elementwise_grad<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    graph: &Graph<'_, S>,
    x: Var,
    g: &[S],
    deriv: impl Fn(usize, S) -> S,
) {
    let xd = graph.data(x);
    accumulate(grads, graph, x, |dst| {
        for (i, d) in dst.iter_mut().enumerate() {
            *d += g[i] * deriv(i, xd[i]);
        }
    });
}

/// Floored at the smallest normal value so the output stays strictly positive
/// where `exp(x)` underflows.
pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    let y = if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    };
    y.max(S::min_positive_value())
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Swaps axes `lo < hi` of a row-major buffer.
fn swap_axes<S: Scalar>(data: &[S], shape: &[usize], lo: usize, hi: usize) -> Vec<S> {
    if lo == hi {
        return data.to_vec();
    }
    let pre: usize = shape[..lo].iter().product();
    let d1 = shape[lo];
    let mid: usize = shape[lo + 1..hi].iter().product();
    let d2 = shape[hi];
    let post: usize = shape[hi + 1..].iter().product();
    let mut out = vec![S::zero(); data.len()];
    // input index [p, i, m, j, q] -> output index [p, j, m, i, q]
    for p in 0..pre {
        for i in 0..d1 {
            for m in 0..mid {
                for j in 0..d2 {
                    let src = (((p * d1 + i) * mid + m) * d2 + j) * post;
                    let dst = (((p * d2 + j) * mid + m) * d1 + i) * post;
                    out[dst..dst + post].copy_from_slice(&data[src..src + post]);
                }
            }
        }
    }
    out
}
