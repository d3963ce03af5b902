use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Exponential-moving-average statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        // unfolded patches per sample; empty for pointwise convolutions
        cols: Vec<T>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gate {
        input: Var,
        gate: Var,
    },
    Sum(Var),
    Mean(Var),
    Resize {
        input: Var,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ConfidencePool {
        weights: Var,
        features: Var,
        numer: Vec<T>,
        denom: Vec<T>,
    },
    AttributeLinear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Bce {
        logits: Var,
        targets: Vec<T>,
        pos_weight: Vec<T>,
        neg_weight: Vec<T>,
        norm: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
    name: &'static str,
}

/// Ordered record of executed operations. Inputs always precede the
/// operations that consume them, so a reverse sweep is a valid topological
/// order for the backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    nan_guard: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// Debug builds scan every op output for NaN/Inf.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
            nan_guard: cfg!(debug_assertions),
        }
    }

    pub fn with_nan_guard(mut self, on: bool) -> Self {
        self.nan_guard = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf, "leaf")
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient after [`Graph::backward`]; `None` for values the
    /// loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Which side of its kink every relu input lies on, in execution order.
    /// Two evaluations with equal patterns lie in the same linear piece of
    /// every relu.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|&v| v > T::zero()))
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>, name: &'static str) -> Var {
        if self.nan_guard && !matches!(op, Op::Leaf) && !value.is_finite() {
            panic!("non-finite value produced by {name} (node {})", self.nodes.len());
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims4(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        self.value(v)
            .dims4()
            .map_err(|e| Error::Shape(format!("{what}: {e}")))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.dims4(input, "conv2d input")?, self.dims4(weight, "conv2d weight")?, stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::Config(format!(
                    "conv2d: bias shape {:?} does not match {} output channels",
                    self.shape(b),
                    geom.out_channels
                )));
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let (k, p) = (geom.patch_len(), geom.out_pixels());
        let mut out = vec![T::zero(); geom.batch * geom.out_channels * p];
        let mut cols = Vec::new();
        if !geom.is_pointwise() {
            cols = vec![T::zero(); geom.batch * k * p];
        }
        let in_stride = geom.in_channels * geom.in_pixels();
        for b in 0..geom.batch {
            let xb = &x[b * in_stride..(b + 1) * in_stride];
            let patches: &[T] = if geom.is_pointwise() {
                xb
            } else {
                let cb = &mut cols[b * k * p..(b + 1) * k * p];
                kernels::im2col(xb, &geom, cb);
                cb
            };
            let ob = &mut out[b * geom.out_channels * p..(b + 1) * geom.out_channels * p];
            T::gemm(geom.out_channels, k, p, w, (k, 1), patches, (p, 1), ob, (p, 1), false);
            if let Some(bv) = bias {
                for (co, &bias) in self.value(bv).data().iter().enumerate() {
                    ob[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::new(&[geom.batch, geom.out_channels, geom.out_h, geom.out_w], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, rg, Op::Conv2d { input, weight, bias, geom, cols }, "conv2d"))
    }

    /// Batch normalization over the `B·H·W` elements of each channel. In train
    /// mode the updated running statistics are returned alongside the output.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        mode: BnMode,
        eps: f64,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        let [b, c, h, w] = self.dims4(input, "batch_norm input")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.mean.len() != c {
            return Err(Error::Config(format!("batch_norm: parameters do not match {c} channels")));
        }
        let n = b * h * w;
        let train = mode == BnMode::Train;
        if train && n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch_norm needs at least 2 values per channel in train mode, got {n}"
            )));
        }
        let x = self.value(input).data();
        let hw = h * w;
        let eps = T::lit(eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            let nf = T::from_usize(n).unwrap();
            for ch in 0..c {
                let planes = (0..b).map(|bi| &x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]);
                let m = planes.clone().map(|p| p.iter().copied().sum::<T>()).sum::<T>() / nf;
                let sq = planes
                    .map(|p| p.iter().map(|&v| (v - m) * (v - m)).sum::<T>())
                    .sum::<T>();
                mean[ch] = m;
                var[ch] = sq / nf;
            }
        } else {
            mean.copy_from_slice(&running.mean);
            var.copy_from_slice(&running.var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for (i, ((xs, xh), o)) in x
            .chunks_exact(hw)
            .zip(xhat.chunks_exact_mut(hw))
            .zip(out.chunks_exact_mut(hw))
            .enumerate()
        {
            let ch = i % c;
            let (m, s, gc, bc) = (mean[ch], inv_std[ch], g[ch], be[ch]);
            for ((&xv, h), ov) in xs.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *h = (xv - m) * s;
                *ov = gc * *h + bc;
            }
        }
        let updated = train.then(|| {
            let mom = T::lit(BN_MOMENTUM);
            let unbias = T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap();
            RunningStats {
                mean: running
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &m)| (T::one() - mom) * r + mom * m)
                    .collect(),
                var: running
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(&r, &v)| (T::one() - mom) * r + mom * v * unbias)
                    .collect(),
            }
        });
        let value = Tensor::new(&[b, c, h, w], out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let v = self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            "batch_norm",
        );
        Ok((v, updated))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Sigmoid(x), "sigmoid")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b), "add"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b), "mul"))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let value = self.value(a).map(|v| v * s);
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Scale(a, s), "scale")
    }

    /// `input ⊙ gate` with a single-channel gate broadcast over channels.
    pub fn gate(&mut self, input: Var, gate: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4(input, "gate input")?;
        if self.shape(gate) != [b, 1, h, w] {
            return Err(Error::Shape(format!(
                "gate: expected [{b}, 1, {h}, {w}], got {:?}",
                self.shape(gate)
            )));
        }
        let x = self.value(input).data();
        let m = self.value(gate).data();
        let hw = h * w;
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            let mb = &m[bi * hw..(bi + 1) * hw];
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for (o, (&xv, &mv)) in out[base..base + hw].iter_mut().zip(x[base..base + hw].iter().zip(mb)) {
                    *o = xv * mv;
                }
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        let rg = self.any_grad(&[input, gate]);
        Ok(self.push(value, rg, Op::Gate { input, gate }, "gate"))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x), "mean")
    }

    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [b, c, h, w] = self.dims4(input, "resize input")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("resize: output extents must be at least 1".into()));
        }
        let out = kernels::resize_planes(self.value(input).data(), b * c, h, w, out_h, out_w);
        let value = Tensor::new(&[b, c, out_h, out_w], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::Resize { input }, "resize_bilinear"))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4(input, "global_avg_pool input")?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let x = self.value(input).data();
        let out = (0..b * c)
            .map(|i| x[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[b, c], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::GlobalAvgPool(input), "global_avg_pool"))
    }

    /// `input · weightᵀ + bias` for `input: [B, D]`, `weight: [O, D]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (b, d, o) = match (self.shape(input), self.shape(weight)) {
            (&[b, d], &[o, d2]) if d == d2 => (b, d, o),
            (xs, ws) => return Err(Error::Shape(format!("linear: input {xs:?}, weight {ws:?}"))),
        };
        if self.shape(bias) != [o] {
            return Err(Error::Shape(format!("linear: bias {:?}, expected [{o}]", self.shape(bias))));
        }
        let mut out = vec![T::zero(); b * o];
        T::gemm(b, d, o, self.value(input).data(), (d, 1), self.value(weight).data(), (1, d), &mut out, (o, 1), false);
        let bv = self.value(bias).data();
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
        }
        let value = Tensor::new(&[b, o], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::Linear { input, weight, bias }, "linear"))
    }

    /// Per-attribute weighted spatial average. For `weights: [B, C, H, W]`
    /// (non-negative confidences) and `features: [B, D, H, W]` the output is
    /// `[B, C, D]` with `out[b,c,:] = Σ_p w[b,c,p]·f[b,:,p] / (Σ_p w[b,c,p] + eps)`.
    pub fn confidence_pool(&mut self, weights: Var, features: Var, eps: f64) -> Result<Var> {
        let [b, c, h, w] = self.dims4(weights, "confidence_pool weights")?;
        let [fb, d, fh, fw] = self.dims4(features, "confidence_pool features")?;
        if (fb, fh, fw) != (b, h, w) {
            return Err(Error::Shape(format!(
                "confidence_pool: weights {:?} vs features {:?}",
                self.shape(weights),
                self.shape(features)
            )));
        }
        let p = h * w;
        let wt = self.value(weights).data();
        let ft = self.value(features).data();
        let mut numer = vec![T::zero(); b * c * d];
        let mut denom = vec![T::zero(); b * c];
        let eps = T::lit(eps);
        for bi in 0..b {
            let wb = &wt[bi * c * p..(bi + 1) * c * p];
            let fbv = &ft[bi * d * p..(bi + 1) * d * p];
            T::gemm(c, p, d, wb, (p, 1), fbv, (1, p), &mut numer[bi * c * d..(bi + 1) * c * d], (d, 1), false);
            for ci in 0..c {
                denom[bi * c + ci] = wb[ci * p..(ci + 1) * p].iter().copied().sum::<T>() + eps;
            }
        }
        let out = numer
            .iter()
            .enumerate()
            .map(|(i, &nv)| nv / denom[i / d])
            .collect();
        let value = Tensor::new(&[b, c, d], out)?;
        let rg = self.any_grad(&[weights, features]);
        Ok(self.push(
            value,
            rg,
            Op::ConfidencePool {
                weights,
                features,
                numer,
                denom,
            },
            "confidence_pool",
        ))
    }

    /// Independent linear classifier per attribute: `out[b,c] = input[b,c,:]·weight[c,:] + bias[c]`.
    pub fn attribute_linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (b, c, d) = match (self.shape(input), self.shape(weight), self.shape(bias)) {
            (&[b, c, d], &[c2, d2], &[c3]) if c == c2 && c == c3 && d == d2 => (b, c, d),
            (xs, ws, bs) => {
                return Err(Error::Shape(format!(
                    "attribute_linear: input {xs:?}, weight {ws:?}, bias {bs:?}"
                )))
            }
        };
        let x = self.value(input).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let out = (0..b * c)
            .map(|i| {
                let ci = i % c;
                x[i * d..(i + 1) * d]
                    .iter()
                    .zip(&wv[ci * d..(ci + 1) * d])
                    .map(|(&a, &bw)| a * bw)
                    .sum::<T>()
                    + bv[ci]
            })
            .collect();
        let value = Tensor::new(&[b, c], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::AttributeLinear { input, weight, bias }, "attribute_linear"))
    }

    /// Weighted binary cross-entropy on logits, reduced to a scalar:
    /// `Σ_i [pos_i·y_i·softplus(−x_i) + neg_i·(1−y_i)·softplus(x_i)] / norm`.
    /// Entries with both weights zero are ignored.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: Vec<T>,
        pos_weight: Vec<T>,
        neg_weight: Vec<T>,
        norm: T,
    ) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n || pos_weight.len() != n || neg_weight.len() != n {
            return Err(Error::Shape(format!(
                "bce: {n} logits but {} targets / {} / {} weights",
                targets.len(),
                pos_weight.len(),
                neg_weight.len()
            )));
        }
        let x = self.value(logits).data();
        let mut total = T::zero();
        for i in 0..n {
            let (y, wp, wn) = (targets[i], pos_weight[i], neg_weight[i]);
            if wp != T::zero() && y != T::zero() {
                total += wp * y * kernels::softplus(-x[i]);
            }
            if wn != T::zero() && y != T::one() {
                total += wn * (T::one() - y) * kernels::softplus(x[i]);
            }
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / norm),
            rg,
            Op::Bce {
                logits,
                targets,
                pos_weight,
                neg_weight,
                norm,
            },
            "bce_with_logits",
        ))
    }

    /// Clears gradients so [`Graph::backward`] may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively on
    /// every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward called twice without zero_grad".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = {
                let (before, rest) = self.nodes.split_at(i);
                backward_rule(&rest[0], &gout, before)
            };
            self.nodes[i].grad = Some(gout);
            for (v, g) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }
}

fn backward_rule<T: Real>(node: &Node<T>, gout: &[T], nodes: &[Node<T>]) -> Vec<(Var, Vec<T>)> {
    let needs = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| &nodes[v.0].value;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let g = geom;
            let (k, p) = (g.patch_len(), g.out_pixels());
            let x = val(*input).data();
            let w = val(*weight).data();
            let in_stride = g.in_channels * g.in_pixels();
            let out_stride = g.out_channels * p;
            if needs(*input) {
                let mut dx = vec![T::zero(); x.len()];
                let mut dcols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }];
                for b in 0..g.batch {
                    let dy = &gout[b * out_stride..(b + 1) * out_stride];
                    let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
                    if g.is_pointwise() {
                        T::gemm(k, g.out_channels, p, w, (1, k), dy, (p, 1), dxb, (p, 1), false);
                    } else {
                        T::gemm(k, g.out_channels, p, w, (1, k), dy, (p, 1), &mut dcols, (p, 1), false);
                        kernels::col2im(&dcols, g, dxb);
                    }
                }
                out.push((*input, dx));
            }
            if needs(*weight) {
                let mut dw = vec![T::zero(); w.len()];
                for b in 0..g.batch {
                    let dy = &gout[b * out_stride..(b + 1) * out_stride];
                    let patches = if g.is_pointwise() {
                        &x[b * in_stride..(b + 1) * in_stride]
                    } else {
                        &cols[b * k * p..(b + 1) * k * p]
                    };
                    T::gemm(g.out_channels, p, k, dy, (p, 1), patches, (1, p), &mut dw, (k, 1), true);
                }
                out.push((*weight, dw));
            }
            if let Some(bv) = bias.filter(|&b| needs(b)) {
                let mut db = vec![T::zero(); g.out_channels];
                for b in 0..g.batch {
                    for (co, d) in db.iter_mut().enumerate() {
                        let s = (b * g.out_channels + co) * p;
                        *d += gout[s..s + p].iter().copied().sum::<T>();
                    }
                }
                out.push((bv, db));
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let [b, c, h, w] = val(*input).dims4().expect("rank 4");
            let hw = h * w;
            let n = T::from_usize(b * hw).unwrap();
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for (i, (dy, xh)) in gout.chunks_exact(hw).zip(xhat.chunks_exact(hw)).enumerate() {
                let ch = i % c;
                sum_dy[ch] += dy.iter().copied().sum::<T>();
                sum_dy_xhat[ch] += dy.iter().zip(xh).map(|(&d, &x)| d * x).sum::<T>();
            }
            let gm = val(*gamma).data();
            if needs(*input) {
                // dx = a·dy + b + c·xhat per channel
                let coef: Vec<(T, T, T)> = (0..c)
                    .map(|ch| {
                        let k = gm[ch] * inv_std[ch];
                        if *train {
                            (k, -k * sum_dy[ch] / n, -k * sum_dy_xhat[ch] / n)
                        } else {
                            (k, T::zero(), T::zero())
                        }
                    })
                    .collect();
                let mut dx = vec![T::zero(); gout.len()];
                for (i, ((d, dy), xh)) in dx
                    .chunks_exact_mut(hw)
                    .zip(gout.chunks_exact(hw))
                    .zip(xhat.chunks_exact(hw))
                    .enumerate()
                {
                    let (a, bb, cc) = coef[i % c];
                    for ((dv, &g), &x) in d.iter_mut().zip(dy).zip(xh) {
                        *dv = a * g + bb + cc * x;
                    }
                }
                out.push((*input, dx));
            }
            if needs(*gamma) {
                out.push((*gamma, sum_dy_xhat));
            }
            if needs(*beta) {
                out.push((*beta, sum_dy));
            }
        }
        Op::Relu(x) => {
            if needs(*x) {
                let dx = gout
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
        }
        Op::Sigmoid(x) => {
            if needs(*x) {
                let dx = gout
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                out.push((*x, dx));
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if needs(*v) {
                    out.push((*v, gout.to_vec()));
                }
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                out.push((*a, gout.iter().zip(val(*b).data()).map(|(&g, &y)| g * y).collect()));
            }
            if needs(*b) {
                out.push((*b, gout.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).collect()));
            }
        }
        Op::Scale(a, s) => {
            if needs(*a) {
                out.push((*a, gout.iter().map(|&g| g * *s).collect()));
            }
        }
        Op::Gate { input, gate } => {
            let [b, c, h, w] = val(*input).dims4().expect("rank 4");
            let hw = h * w;
            let x = val(*input).data();
            let m = val(*gate).data();
            if needs(*input) {
                let mut dx = vec![T::zero(); x.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for p in 0..hw {
                            dx[base + p] = gout[base + p] * m[bi * hw + p];
                        }
                    }
                }
                out.push((*input, dx));
            }
            if needs(*gate) {
                let mut dm = vec![T::zero(); m.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for p in 0..hw {
                            dm[bi * hw + p] += gout[base + p] * x[base + p];
                        }
                    }
                }
                out.push((*gate, dm));
            }
        }
        Op::Sum(x) => {
            if needs(*x) {
                out.push((*x, vec![gout[0]; val(*x).numel()]));
            }
        }
        Op::Mean(x) => {
            if needs(*x) {
                let n = val(*x).numel();
                out.push((*x, vec![gout[0] / T::from_usize(n).unwrap(); n]));
            }
        }
        Op::Resize { input } => {
            if needs(*input) {
                let [b, c, h, w] = val(*input).dims4().expect("rank 4");
                let [_, _, oh, ow] = node.value.dims4().expect("rank 4");
                let mut dx = vec![T::zero(); b * c * h * w];
                kernels::resize_planes_backward(gout, b * c, h, w, oh, ow, &mut dx);
                out.push((*input, dx));
            }
        }
        Op::GlobalAvgPool(x) => {
            if needs(*x) {
                let [b, c, h, w] = val(*x).dims4().expect("rank 4");
                let hw = h * w;
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut dx = vec![T::zero(); b * c * hw];
                for (i, &g) in gout.iter().enumerate() {
                    dx[i * hw..(i + 1) * hw].fill(g * inv);
                }
                out.push((*x, dx));
            }
        }
        Op::Linear { input, weight, bias } => {
            let (b, d) = (val(*input).shape()[0], val(*input).shape()[1]);
            let o = val(*weight).shape()[0];
            if needs(*input) {
                let mut dx = vec![T::zero(); b * d];
                T::gemm(b, o, d, gout, (o, 1), val(*weight).data(), (d, 1), &mut dx, (d, 1), false);
                out.push((*input, dx));
            }
            if needs(*weight) {
                let mut dw = vec![T::zero(); o * d];
                T::gemm(o, b, d, gout, (1, o), val(*input).data(), (d, 1), &mut dw, (d, 1), false);
                out.push((*weight, dw));
            }
            if needs(*bias) {
                let mut db = vec![T::zero(); o];
                for row in gout.chunks(o) {
                    db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                }
                out.push((*bias, db));
            }
        }
        Op::ConfidencePool {
            weights,
            features,
            numer,
            denom,
        } => {
            let [b, c, h, w] = val(*weights).dims4().expect("rank 4");
            let d = val(*features).shape()[1];
            let p = h * w;
            let wt = val(*weights).data();
            let ft = val(*features).data();
            // d(out)/d(numer) and d(out)/d(denom)
            let dnum: Vec<T> = gout.iter().enumerate().map(|(i, &g)| g / denom[i / d]).collect();
            let dden: Vec<T> = (0..b * c)
                .map(|bc| {
                    let s = denom[bc];
                    -(0..d).map(|j| gout[bc * d + j] * numer[bc * d + j]).sum::<T>() / (s * s)
                })
                .collect();
            if needs(*weights) {
                let mut dw = vec![T::zero(); wt.len()];
                for bi in 0..b {
                    let dwb = &mut dw[bi * c * p..(bi + 1) * c * p];
                    T::gemm(c, d, p, &dnum[bi * c * d..(bi + 1) * c * d], (d, 1), &ft[bi * d * p..(bi + 1) * d * p], (p, 1), dwb, (p, 1), false);
                    for ci in 0..c {
                        let s = dden[bi * c + ci];
                        dwb[ci * p..(ci + 1) * p].iter_mut().for_each(|v| *v += s);
                    }
                }
                out.push((*weights, dw));
            }
            if needs(*features) {
                let mut df = vec![T::zero(); ft.len()];
                for bi in 0..b {
                    T::gemm(
                        d,
                        c,
                        p,
                        &dnum[bi * c * d..(bi + 1) * c * d],
                        (1, d),
                        &wt[bi * c * p..(bi + 1) * c * p],
                        (p, 1),
                        &mut df[bi * d * p..(bi + 1) * d * p],
                        (p, 1),
                        false,
                    );
                }
                out.push((*features, df));
            }
        }
        Op::AttributeLinear { input, weight, bias } => {
            let (b, c, d) = {
                let s = val(*input).shape();
                (s[0], s[1], s[2])
            };
            let x = val(*input).data();
            let wv = val(*weight).data();
            if needs(*input) {
                let mut dx = vec![T::zero(); x.len()];
                for i in 0..b * c {
                    let ci = i % c;
                    for j in 0..d {
                        dx[i * d + j] = gout[i] * wv[ci * d + j];
                    }
                }
                out.push((*input, dx));
            }
            if needs(*weight) {
                let mut dw = vec![T::zero(); wv.len()];
                for i in 0..b * c {
                    let ci = i % c;
                    for j in 0..d {
                        dw[ci * d + j] += gout[i] * x[i * d + j];
                    }
                }
                out.push((*weight, dw));
            }
            if needs(*bias) {
                let mut db = vec![T::zero(); c];
                for (i, &g) in gout.iter().enumerate() {
                    db[i % c] += g;
                }
                out.push((*bias, db));
            }
        }
        Op::Bce {
            logits,
            targets,
            pos_weight,
            neg_weight,
            norm,
        } => {
            if needs(*logits) {
                let scale = gout[0] / *norm;
                let dx = val(*logits)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let s = kernels::sigmoid(x);
                        let y = targets[i];
                        scale * (pos_weight[i] * y * (s - T::one()) + neg_weight[i] * (T::one() - y) * s)
                    })
                    .collect();
                out.push((*logits, dx));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[0.5, -1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient_is_twice_x() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_contract_violations() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn two_branch_use_accumulates() {
        // loss = sum(3x) + sum(x⊙x)
        let x0 = [0.3, -0.7];
        let single = |branch: u8| {
            let mut g = Graph::new();
            let x = g.param(t(&[2], &x0));
            let y = if branch == 0 {
                g.scale(x, 3.0)
            } else {
                g.mul(x, x).unwrap()
            };
            let s = g.sum(y);
            g.backward(s).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let mut g = Graph::new();
        let x = g.param(t(&[2], &x0));
        let a = g.scale(x, 3.0);
        let b = g.mul(x, x).unwrap();
        let sa = g.sum(a);
        let sb = g.sum(b);
        let s = g.add(sa, sb).unwrap();
        g.backward(s).unwrap();
        let (ga, gb) = (single(0), single(1));
        for i in 0..2 {
            assert!((g.grad(x).unwrap()[i] - (ga[i] + gb[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn batch_norm_rejects_single_value_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[1, 2, 1, 1]));
        let ga = g.param(Tensor::full(&[2], 1.0));
        let be = g.param(Tensor::zeros(&[2]));
        let rs = RunningStats::new(2);
        assert!(matches!(
            g.batch_norm(x, ga, be, &rs, BnMode::Train, 1e-5),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(g.batch_norm(x, ga, be, &rs, BnMode::Eval, 1e-5).is_ok());
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic(expected = "non-finite value produced by scale")]
    fn nan_guard_names_the_op() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[1e300]));
        g.scale(x, 1e300);
    }
}
