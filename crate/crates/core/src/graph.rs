//! Operation tape with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so node index order is a
//! topological order and `backward` just walks indices downwards. Each op
//! caches whatever its backward pass needs (argmax positions, softmax rows,
//! sampling taps).

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, pairwise_sum_strided, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Sparse linear read of an input tensor: each output element is
/// `Σ weight · input[index]` over its taps.
pub type Taps = Vec<Vec<(usize, f64)>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Sum(Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    SpatialPool { input: Var, mode: PoolMode, argmax: Vec<usize>, margin: f64 },
    ChannelPool { input: Var, mode: PoolMode, argmax: Vec<usize>, margin: f64 },
    ScaleChannels { gate: Var, input: Var },
    ScaleSpatial { gate: Var, input: Var },
    Concat(Vec<Var>),
    MaxPool2d { input: Var, argmax: Vec<usize>, margin: f64 },
    Upsample { input: Var, factor: usize },
    ChannelConv1d { input: Var, weight: Var },
    Sparse { input: Var, taps: Taps },
    Select { input: Var, indices: Vec<usize> },
    BinaryCrossEntropy { probs: Var, targets: Vec<f64> },
    SmoothL1 { input: Var, targets: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Probability clamp used by the cross-entropy ops.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Distance of the recorded forward pass from the nearest kink: the
    /// smallest |x| entering a ReLU and the smallest top-two gap of any max
    /// window. Finite differences are only meaningful when this is large
    /// relative to the probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for n in &self.nodes {
            match &n.op {
                Op::Relu(a) => {
                    for &v in self.value(*a).data() {
                        m = m.min(v.abs());
                    }
                }
                Op::SpatialPool { margin, .. } | Op::ChannelPool { margin, .. } | Op::MaxPool2d { margin, .. } => {
                    m = m.min(*margin)
                }
                _ => {}
            }
        }
        m
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {} is not finite", op_name(&op))));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a), &[a])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Sum of several one-element nodes, left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Shape("add_all of nothing".into()))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Zero-padded 2-D convolution of a `C_in×H×W` map with a
    /// `C_out×C_in×k×k` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let value = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.push(value, Op::Conv2d { input, weight, bias, stride, pad }, &parents)
    }

    /// Row-wise affine map: `N×in` times `out×in`ᵀ plus bias → `N×out`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, fin) = match x.shape() {
            [n, f] => (*n, *f),
            s => return Err(Error::Shape(format!("linear input must be N×F, got {s:?}"))),
        };
        let fout = match w.shape() {
            [o, i] if *i == fin => *o,
            s => return Err(Error::Shape(format!("linear weight {s:?} does not accept {fin} inputs"))),
        };
        if let Some(b) = bias {
            if self.value(b).shape() != [fout] {
                return Err(Error::Shape(format!(
                    "linear bias {:?}, expected [{fout}]",
                    self.value(b).shape()
                )));
            }
        }
        let xd = x.data();
        let wd = w.data();
        let bd = bias.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * fout];
        for r in 0..n {
            let xr = &xd[r * fin..(r + 1) * fin];
            for o in 0..fout {
                let wr = &wd[o * fin..(o + 1) * fin];
                let mut acc = bd.map_or(0.0, |b| b[o]);
                for i in 0..fin {
                    acc += wr[i] * xr[i];
                }
                out[r * fout + o] = acc;
            }
        }
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.push(Tensor::from_parts(vec![n, fout], out), Op::Linear { input, weight, bias }, &parents)
    }

    /// Global reduction over H×W: `C×H×W → C×1×1`.
    pub fn spatial_pool(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.chw()?;
        let hw = h * w;
        let mut out = vec![0.0; c];
        let mut argmax = Vec::new();
        let mut margin = f64::INFINITY;
        for ch in 0..c {
            let plane = &x.data()[ch * hw..(ch + 1) * hw];
            match mode {
                PoolMode::Avg => out[ch] = pairwise_sum(plane) / hw as f64,
                PoolMode::Max => {
                    let k = first_argmax(plane.iter().copied());
                    margin = margin.min(top_gap(plane.iter().copied()));
                    argmax.push(ch * hw + k);
                    out[ch] = plane[k];
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![c, 1, 1], out),
            Op::SpatialPool { input, mode, argmax, margin },
            &[input],
        )
    }

    /// Reduction across channels at each pixel: `C×H×W → 1×H×W`.
    pub fn channel_pool(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.chw()?;
        let hw = h * w;
        let mut out = vec![0.0; hw];
        let mut argmax = Vec::new();
        let mut margin = f64::INFINITY;
        for p in 0..hw {
            match mode {
                PoolMode::Avg => out[p] = pairwise_sum_strided(x.data(), p, hw, c) / c as f64,
                PoolMode::Max => {
                    let k = first_argmax((0..c).map(|ch| x.data()[ch * hw + p]));
                    margin = margin.min(top_gap((0..c).map(|ch| x.data()[ch * hw + p])));
                    argmax.push(k * hw + p);
                    out[p] = x.data()[k * hw + p];
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![1, h, w], out),
            Op::ChannelPool { input, mode, argmax, margin },
            &[input],
        )
    }

    /// `C×1×1 ⊗ C×H×W`.
    pub fn scale_channels(&mut self, gate: Var, input: Var) -> Result<Var> {
        let x = self.value(input);
        let g = self.value(gate);
        let (c, h, w) = x.chw()?;
        if g.shape() != [c, 1, 1] {
            return Err(Error::Shape(format!("channel gate {:?} for input {:?}", g.shape(), x.shape())));
        }
        let hw = h * w;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g.data()[i / hw])
            .collect();
        self.push(Tensor::from_parts(vec![c, h, w], data), Op::ScaleChannels { gate, input }, &[gate, input])
    }

    /// `1×H×W ⊗ C×H×W`.
    pub fn scale_spatial(&mut self, gate: Var, input: Var) -> Result<Var> {
        let x = self.value(input);
        let g = self.value(gate);
        let (c, h, w) = x.chw()?;
        if g.shape() != [1, h, w] {
            return Err(Error::Shape(format!("spatial gate {:?} for input {:?}", g.shape(), x.shape())));
        }
        let hw = h * w;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g.data()[i % hw])
            .collect();
        self.push(Tensor::from_parts(vec![c, h, w], data), Op::ScaleSpatial { gate, input }, &[gate, input])
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let t = self.value(v);
            if t.shape()[1..] != tail[..] {
                return Err(Error::Shape(format!("concat {:?} with trailing {:?}", t.shape(), tail)));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Tensor::from_parts(shape, data), Op::Concat(inputs.to_vec()), inputs)
    }

    /// Max pooling with a `k×k` window; padded cells never win.
    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.chw()?;
        let (ho, wo) = conv_out_hw(h, w, k, stride, pad)?;
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        let mut margin = f64::INFINITY;
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut second = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (ch * h + iy as usize) * w + ix as usize;
                            let v = x.data()[idx];
                            if v > best {
                                second = best;
                                best = v;
                                best_idx = idx;
                            } else if v > second {
                                second = v;
                            }
                        }
                    }
                    if best_idx == usize::MAX {
                        return Err(Error::Shape("max_pool2d window entirely in padding".into()));
                    }
                    margin = margin.min(best - second);
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        self.push(Tensor::from_parts(vec![c, ho, wo], out), Op::MaxPool2d { input, argmax, margin }, &[input])
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Shape("upsample factor must be ≥ 1".into()));
        }
        let x = self.value(input);
        let (c, h, w) = x.chw()?;
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out.push(x.data()[(ch * h + y / factor) * w + xx / factor]);
                }
            }
        }
        self.push(Tensor::from_parts(vec![c, ho, wo], out), Op::Upsample { input, factor }, &[input])
    }

    /// 1-D convolution across the channel axis of a `C×1×1` descriptor,
    /// zero padded so the channel count is preserved. Kernel length must be odd.
    pub fn channel_conv1d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let (c, h, w) = x.chw()?;
        if h != 1 || w != 1 {
            return Err(Error::Shape(format!("channel_conv1d expects C×1×1, got {:?}", x.shape())));
        }
        let k = match wt.shape() {
            [k] if k % 2 == 1 => *k,
            s => return Err(Error::Shape(format!("channel_conv1d kernel must be odd length, got {s:?}"))),
        };
        let pad = (k - 1) / 2;
        let out = (0..c)
            .map(|ch| {
                let mut acc = 0.0;
                for j in 0..k {
                    let src = ch as isize + j as isize - pad as isize;
                    if src >= 0 && (src as usize) < c {
                        acc += wt.data()[j] * x.data()[src as usize];
                    }
                }
                acc
            })
            .collect();
        self.push(Tensor::from_parts(vec![c, 1, 1], out), Op::ChannelConv1d { input, weight }, &[input, weight])
    }

    /// Output of the given shape whose elements are fixed linear
    /// combinations of input elements. Used for bilinear sampling.
    pub fn sparse(&mut self, input: Var, shape: &[usize], taps: Taps) -> Result<Var> {
        let n: usize = shape.iter().product();
        if taps.len() != n {
            return Err(Error::Shape(format!("{} tap lists for shape {shape:?}", taps.len())));
        }
        let x = self.value(input);
        let mut out = Vec::with_capacity(n);
        for t in &taps {
            let mut acc = 0.0;
            for &(i, wgt) in t {
                let v = *x
                    .data()
                    .get(i)
                    .ok_or_else(|| Error::Shape(format!("tap index {i} out of range")))?;
                acc += wgt * v;
            }
            out.push(acc);
        }
        self.push(Tensor::from_parts(shape.to_vec(), out), Op::Sparse { input, taps }, &[input])
    }

    /// Gather flat elements into a rank-1 tensor.
    pub fn select(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::Shape("select of no elements".into()));
        }
        let x = self.value(input);
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            out.push(
                *x.data()
                    .get(i)
                    .ok_or_else(|| Error::Shape(format!("select index {i} out of range for {:?}", x.shape())))?,
            );
        }
        let n = indices.len();
        self.push(
            Tensor::from_parts(vec![n], out),
            Op::Select { input, indices: indices.to_vec() },
            &[input],
        )
    }

    /// `Σ −[t·ln p + (1−t)·ln(1−p)]` with `p` clamped to `[ε, 1−ε]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let p = self.value(probs);
        if p.len() != targets.len() {
            return Err(Error::Shape(format!("{} probabilities vs {} targets", p.len(), targets.len())));
        }
        let terms: Vec<f64> = p
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| bce_term(p, t))
            .collect();
        self.push(
            Tensor::scalar(pairwise_sum(&terms)),
            Op::BinaryCrossEntropy { probs, targets: targets.to_vec() },
            &[probs],
        )
    }

    /// `Σ smooth_l1(x − t)` over all elements.
    pub fn smooth_l1(&mut self, input: Var, targets: &[f64]) -> Result<Var> {
        let x = self.value(input);
        if x.len() != targets.len() {
            return Err(Error::Shape(format!("{} predictions vs {} targets", x.len(), targets.len())));
        }
        let terms: Vec<f64> = x.data().iter().zip(targets).map(|(&a, &b)| smooth_l1(a - b)).collect();
        self.push(
            Tensor::scalar(pairwise_sum(&terms)),
            Op::SmoothL1 { input, targets: targets.to_vec() },
            &[input],
        )
    }

    /// `Σ_n −ln softmax(logits[n])[label[n]]` for `N×K` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (n, k) = match z.shape() {
            [n, k] => (*n, *k),
            s => return Err(Error::Shape(format!("softmax logits must be N×K, got {s:?}"))),
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::Shape(format!("labels {labels:?} do not fit {n}×{k} logits")));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut terms = Vec::with_capacity(n);
        for (r, &label) in labels.iter().enumerate() {
            let row = &z.data()[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            terms.push(lse - row[label]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        self.push(
            Tensor::scalar(pairwise_sum(&terms)),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    /// Reverse-mode sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g)),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let gy = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                acc(*input, &mut |d| conv2d_grad_input(d, x, w, &gy, *stride, *pad));
                acc(*weight, &mut |d| conv2d_grad_weight(d, x, w, &gy, *stride, *pad));
                if let Some(b) = bias {
                    let (co, ho, wo) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
                    acc(*b, &mut |d| {
                        for c in 0..co {
                            d[c] += pairwise_sum(&g[c * ho * wo..(c + 1) * ho * wo]);
                        }
                    });
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, fin) = (x.shape()[0], x.shape()[1]);
                let fout = w.shape()[0];
                acc(*input, &mut |d| {
                    for r in 0..n {
                        for o in 0..fout {
                            let go = g[r * fout + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &w.data()[o * fin..(o + 1) * fin];
                            let dr = &mut d[r * fin..(r + 1) * fin];
                            for i in 0..fin {
                                dr[i] += go * wr[i];
                            }
                        }
                    }
                });
                acc(*weight, &mut |d| {
                    for r in 0..n {
                        let xr = &x.data()[r * fin..(r + 1) * fin];
                        for o in 0..fout {
                            let go = g[r * fout + o];
                            if go == 0.0 {
                                continue;
                            }
                            let dr = &mut d[o * fin..(o + 1) * fin];
                            for i in 0..fin {
                                dr[i] += go * xr[i];
                            }
                        }
                    }
                });
                if let Some(b) = bias {
                    acc(*b, &mut |d| {
                        for r in 0..n {
                            for o in 0..fout {
                                d[o] += g[r * fout + o];
                            }
                        }
                    });
                }
            }
            Op::SpatialPool { input, mode, argmax, .. } => {
                let (_, h, w) = self.value(*input).chw().expect("rank 3");
                let hw = h * w;
                acc(*input, &mut |d| match mode {
                    PoolMode::Avg => {
                        for (ch, gc) in g.iter().enumerate() {
                            let share = gc / hw as f64;
                            d[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v += share);
                        }
                    }
                    PoolMode::Max => {
                        for (gc, &i) in g.iter().zip(argmax) {
                            d[i] += gc;
                        }
                    }
                });
            }
            Op::ChannelPool { input, mode, argmax, .. } => {
                let (c, h, w) = self.value(*input).chw().expect("rank 3");
                let hw = h * w;
                acc(*input, &mut |d| match mode {
                    PoolMode::Avg => {
                        for ch in 0..c {
                            for p in 0..hw {
                                d[ch * hw + p] += g[p] / c as f64;
                            }
                        }
                    }
                    PoolMode::Max => {
                        for (gp, &i) in g.iter().zip(argmax) {
                            d[i] += gp;
                        }
                    }
                });
            }
            Op::ScaleChannels { gate, input } => {
                let x = self.value(*input).data();
                let gt = self.value(*gate).data();
                let hw = x.len() / gt.len();
                acc(*input, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gt[i / hw];
                    }
                });
                acc(*gate, &mut |d| {
                    for (ch, dc) in d.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for i in ch * hw..(ch + 1) * hw {
                            s += g[i] * x[i];
                        }
                        *dc += s;
                    }
                });
            }
            Op::ScaleSpatial { gate, input } => {
                let x = self.value(*input).data();
                let gt = self.value(*gate).data();
                let hw = gt.len();
                acc(*input, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gt[i % hw];
                    }
                });
                acc(*gate, &mut |d| {
                    for i in 0..x.len() {
                        d[i % hw] += g[i] * x[i];
                    }
                });
            }
            Op::Concat(inputs) => {
                let mut off = 0;
                for v in inputs {
                    let n = self.value(*v).len();
                    acc(*v, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::MaxPool2d { input, argmax, .. } => acc(*input, &mut |d| {
                for (gi, &i) in g.iter().zip(argmax) {
                    d[i] += gi;
                }
            }),
            Op::Upsample { input, factor } => {
                let (c, h, w) = self.value(*input).chw().expect("rank 3");
                let (ho, wo) = (h * factor, w * factor);
                acc(*input, &mut |d| {
                    for ch in 0..c {
                        for y in 0..ho {
                            for x in 0..wo {
                                d[(ch * h + y / factor) * w + x / factor] += g[(ch * ho + y) * wo + x];
                            }
                        }
                    }
                });
            }
            Op::ChannelConv1d { input, weight } => {
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                let (c, k) = (x.len(), wt.len());
                let pad = (k - 1) / 2;
                let src = |ch: usize, j: usize| {
                    let s = ch as isize + j as isize - pad as isize;
                    (s >= 0 && (s as usize) < c).then_some(s as usize)
                };
                acc(*input, &mut |d| {
                    for ch in 0..c {
                        for j in 0..k {
                            if let Some(s) = src(ch, j) {
                                d[s] += wt[j] * g[ch];
                            }
                        }
                    }
                });
                acc(*weight, &mut |d| {
                    for ch in 0..c {
                        for j in 0..k {
                            if let Some(s) = src(ch, j) {
                                d[j] += x[s] * g[ch];
                            }
                        }
                    }
                });
            }
            Op::Sparse { input, taps } => acc(*input, &mut |d| {
                for (gi, t) in g.iter().zip(taps) {
                    for &(i, wgt) in t {
                        d[i] += wgt * gi;
                    }
                }
            }),
            Op::Select { input, indices } => acc(*input, &mut |d| {
                for (gi, &i) in g.iter().zip(indices) {
                    d[i] += gi;
                }
            }),
            Op::BinaryCrossEntropy { probs, targets } => {
                let p = self.value(*probs).data();
                acc(*probs, &mut |d| {
                    for i in 0..d.len() {
                        let (pi, t) = (p[i], targets[i]);
                        if (PROB_EPS..=1.0 - PROB_EPS).contains(&pi) {
                            d[i] += g[0] * (-t / pi + (1.0 - t) / (1.0 - pi));
                        }
                    }
                });
            }
            Op::SmoothL1 { input, targets } => {
                let x = self.value(*input).data();
                acc(*input, &mut |d| {
                    for i in 0..d.len() {
                        let diff = x[i] - targets[i];
                        let slope = if diff.abs() < 1.0 { diff } else { diff.signum() };
                        d[i] += g[0] * slope;
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).shape()[1];
                acc(*logits, &mut |d| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            d[r * k + j] += g[0] * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Gradient store returned by [`Graph::backward`], keyed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Reshape(_) => "reshape",
        Op::Sum(_) => "sum",
        Op::Conv2d { .. } => "conv2d",
        Op::Linear { .. } => "linear",
        Op::SpatialPool { .. } => "spatial_pool",
        Op::ChannelPool { .. } => "channel_pool",
        Op::ScaleChannels { .. } => "scale_channels",
        Op::ScaleSpatial { .. } => "scale_spatial",
        Op::Concat(_) => "concat",
        Op::MaxPool2d { .. } => "max_pool2d",
        Op::Upsample { .. } => "upsample_nearest",
        Op::ChannelConv1d { .. } => "channel_conv1d",
        Op::Sparse { .. } => "sparse",
        Op::Select { .. } => "select",
        Op::BinaryCrossEntropy { .. } => "binary_cross_entropy",
        Op::SmoothL1 { .. } => "smooth_l1",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

/// Index of the first maximum in scan order.
/// Gap between the largest and second-largest values, infinite for fewer than two.
fn top_gap(it: impl Iterator<Item = f64>) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in it {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    a - b
}

fn first_argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut idx = 0;
    for (i, v) in it.enumerate() {
        if v > best {
            best = v;
            idx = i;
        }
    }
    idx
}

/// Logistic function, split by sign so neither branch overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_term(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

pub(crate) fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Output extent `floor((n + 2·pad − k)/stride) + 1` for both spatial axes.
pub fn conv_out_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Shape(format!(
            "window {k} stride {stride} pad {pad} does not fit {h}×{w}"
        )));
    }
    Ok(((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1))
}

/// Range of output positions `o` for which `o·stride + off − pad` lands in `[0, n)`.
fn valid_range(off: usize, pad: usize, stride: usize, n: usize, out_n: usize) -> (usize, usize) {
    let lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
    // need o*stride + off - pad <= n-1
    let hi = if n + pad < off + 1 { 0 } else { ((n + pad - off - 1) / stride + 1).min(out_n) };
    (lo.min(hi), hi)
}

fn conv_shapes(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (cin, h, wd) = x.chw()?;
    match w.shape() {
        [co, ci, kh, kw] if *ci == cin && kh == kw => Ok((cin, h, wd, *co, *kh)),
        s => Err(Error::Shape(format!(
            "conv2d weight {s:?} incompatible with input {:?}",
            x.shape()
        ))),
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (cin, h, wd, cout, k) = conv_shapes(x, w)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::Shape(format!("conv2d bias {:?}, expected [{cout}]", b.shape())));
        }
    }
    let (ho, wo) = conv_out_hw(h, wd, k, stride, pad)?;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b.data()[co]);
        }
        for ci in 0..cin {
            let xin = &xd[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ky, pad, stride, h, ho);
                for kx in 0..k {
                    let wv = wdat[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(kx, pad, stride, wd, wo);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &xin[iy * wd..(iy + 1) * wd];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let base = kx as isize - pad as isize;
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[(ox as isize + base) as usize];
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![cout, ho, wo], out))
}

fn conv2d_grad_input(d: &mut [f64], x: &Tensor, w: &Tensor, gy: &Tensor, stride: usize, pad: usize) {
    let (cin, h, wd, cout, k) = conv_shapes(x, w).expect("checked in forward");
    let (ho, wo) = (gy.shape()[1], gy.shape()[2]);
    let g = gy.data();
    for co in 0..cout {
        let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..cin {
            let dplane = &mut d[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ky, pad, stride, h, ho);
                for kx in 0..k {
                    let wv = w.data()[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(kx, pad, stride, wd, wo);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        let drow = &mut dplane[iy * wd..(iy + 1) * wd];
                        for ox in ox0..ox1 {
                            drow[ox * stride + kx - pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_grad_weight(d: &mut [f64], x: &Tensor, w: &Tensor, gy: &Tensor, stride: usize, pad: usize) {
    let (cin, h, wd, cout, k) = conv_shapes(x, w).expect("checked in forward");
    let (ho, wo) = (gy.shape()[1], gy.shape()[2]);
    let g = gy.data();
    for co in 0..cout {
        let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..cin {
            let xin = &x.data()[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(ky, pad, stride, h, ho);
                for kx in 0..k {
                    let (ox0, ox1) = valid_range(kx, pad, stride, wd, wo);
                    let mut s = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &xin[iy * wd..(iy + 1) * wd];
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        for ox in ox0..ox1 {
                            s += grow[ox] * row[ox * stride + kx - pad];
                        }
                    }
                    d[((co * cin + ci) * k + ky) * k + kx] += s;
                }
            }
        }
    }
}
