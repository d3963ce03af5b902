use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BnMode, Graph, Real, RunningStats, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StatsId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named trainable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    stats: Vec<(String, RunningStats<T>)>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            stats: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats<T> {
        &self.stats[id.0].1
    }

    pub fn stats_entries(&self) -> &[(String, RunningStats<T>)] {
        &self.stats
    }

    pub fn set_stats(&mut self, id: StatsId, stats: RunningStats<T>) {
        self.stats[id.0].1 = stats;
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar parameter counts keyed by the first component of each name.
    pub fn breakdown(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            let key = p.name.split('.').next().unwrap_or("").to_string();
            *out.entry(key).or_insert(0) += p.value.numel();
        }
        out
    }

    /// Every stored tensor (parameters, then `running_mean`/`running_var`
    /// pairs) sorted by name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (name, s) in &self.stats {
            let c = s.mean.len();
            out.push((format!("{name}.running_mean"), Tensor::new(&[c], s.mean.clone()).unwrap()));
            out.push((format!("{name}.running_var"), Tensor::new(&[c], s.var.clone()).unwrap()));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Replaces every tensor from a name→tensor map; the map must cover
    /// exactly the stored names with matching shapes.
    pub fn assign(&mut self, mut tensors: BTreeMap<String, Tensor<T>>) -> Result<()> {
        for p in &mut self.params {
            let t = tensors
                .remove(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "tensor {}: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        for (name, s) in &mut self.stats {
            for (suffix, slot) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                let key = format!("{name}.{suffix}");
                let t = tensors
                    .remove(&key)
                    .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {key}")))?;
                if t.numel() != slot.len() {
                    return Err(Error::Config(format!("tensor {key}: wrong length {}", t.numel())));
                }
                *slot = t.into_data();
            }
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Config(format!("checkpoint has unexpected tensor {extra}")));
        }
        Ok(())
    }

    /// Raw little-endian bytes of every parameter in registration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.params {
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `N(0, 2/fan_in)`.
    KaimingFanIn,
    /// `N(0, std²)`.
    Gaussian(f64),
}

/// Registers layers into a [`ParamStore`], drawing initial values from a
/// seeded generator in registration order.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder { store, rng }
    }

    fn add(&mut self, name: String, value: Tensor<T>) -> ParamId {
        debug_assert!(self.store.id_of(&name).is_none(), "duplicate parameter {name}");
        self.store.params.push(Param { name, value });
        ParamId(self.store.params.len() - 1)
    }

    fn random(&mut self, shape: &[usize], fan_in: usize, init: Init) -> Tensor<T> {
        let std = match init {
            Init::KaimingFanIn => (2.0 / fan_in as f64).sqrt(),
            Init::Gaussian(s) => s,
        };
        let normal = Normal::new(0.0, std).expect("finite std");
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
    ) -> Conv2d {
        let w = self.random(&[cout, cin, kernel, kernel], cin * kernel * kernel, init);
        let weight = self.add(format!("{name}.weight"), w);
        let bias = bias.then(|| self.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> BatchNorm2d {
        let gamma = self.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = self.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.store.stats.push((name.to_string(), RunningStats::new(channels)));
        BatchNorm2d {
            gamma,
            beta,
            stats: StatsId(self.store.stats.len() - 1),
        }
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize, init: Init) -> Linear {
        let w = self.random(&[dout, din], din, init);
        Linear {
            weight: self.add(format!("{name}.weight"), w),
            bias: self.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    /// Per-attribute classifier weights `[C, D]` and biases `[C]`.
    pub fn attribute_linear(&mut self, name: &str, attributes: usize, dim: usize, init: Init) -> Linear {
        self.linear(name, dim, attributes, init)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }
}

/// One forward evaluation of a model: the graph being recorded, the
/// parameter leaves bound so far and pending running-stat updates.
pub struct ForwardCtx<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: BnMode,
    trainable: bool,
    stat_updates: Vec<(StatsId, RunningStats<T>)>,
}

impl<'a, T: Real> ForwardCtx<'a, T> {
    /// Parameters become gradient-tracking leaves when `trainable`.
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: BnMode, trainable: bool) -> Self {
        ForwardCtx {
            graph,
            bound: vec![None; store.len()],
            store,
            mode,
            trainable,
            stat_updates: Vec::new(),
        }
    }

    /// Uses caller-provided graph values for every parameter, in store order.
    pub fn with_bindings(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: BnMode, vars: &[Var]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Config(format!(
                "expected {} parameter bindings, got {}",
                store.len(),
                vars.len()
            )));
        }
        let mut ctx = Self::new(graph, store, mode, true);
        ctx.bound = vars.iter().copied().map(Some).collect();
        Ok(ctx)
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn finish(self) -> Bindings<T> {
        Bindings {
            bound: self.bound,
            stat_updates: self.stat_updates,
        }
    }
}

/// What a finished forward pass leaves behind for the optimizer.
pub struct Bindings<T> {
    pub bound: Vec<Option<Var>>,
    pub stat_updates: Vec<(StatsId, RunningStats<T>)>,
}

impl<T: Real> Bindings<T> {
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn apply_stats(self, store: &mut ParamStore<T>) {
        for (id, s) in self.stat_updates {
            store.set_stats(id, s);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.graph.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm2d {
    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let (y, update) = ctx
            .graph
            .batch_norm(x, g, b, ctx.store.stats(self.stats), ctx.mode, BN_EPS)?;
        if let Some(u) = update {
            ctx.stat_updates.push((self.stats, u));
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.linear(x, w, b)
    }

    pub fn forward_per_attribute<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.attribute_linear(x, w, b)
    }
}

/// Convolution followed by batch norm and an optional relu.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        init: Init,
    ) -> Self {
        ConvBn {
            conv: pb.conv(&format!("{name}.conv"), cin, cout, kernel, stride, kernel / 2, false, init),
            bn: pb.batch_norm(&format!("{name}.bn"), cout),
            relu,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if self.relu { ctx.graph.relu(y) } else { y })
    }
}
