//! Parameter storage and the fixed layer wrappers shared by both networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::norm::RunningStats;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// What a stored tensor is, from the optimizers' point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Network weight, updated by the weight optimizer.
    Weight,
    /// Architecture mixing weights, updated by the architecture optimizer.
    Alpha,
    /// Present in the graph but excluded from every optimizer
    /// (batch-norm affine parameters during search).
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(pub usize);

pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// All learnable state of one network, plus batch-norm running statistics.
pub struct ParamStore<T: Scalar> {
    pub params: Vec<ParamEntry<T>>,
    pub buffers: Vec<(String, RunningStats<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(ParamEntry { name, value, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, channels: usize) -> BufferId {
        self.buffers.push((name.into(), RunningStats::new(channels)));
        BufferId(self.buffers.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn ids_of_kind(&self, kind: ParamKind) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind == kind)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Deep copy of parameter values (for virtual steps and checkpoints).
    pub fn snapshot_values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_values(&mut self, values: &[Tensor<T>]) {
        assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v.clone();
        }
    }

    pub fn snapshot_buffers(&self) -> Vec<RunningStats<T>> {
        self.buffers.iter().map(|(_, b)| b.clone()).collect()
    }

    pub fn restore_buffers(&mut self, buffers: &[RunningStats<T>]) {
        assert_eq!(buffers.len(), self.buffers.len());
        for ((_, b), s) in self.buffers.iter_mut().zip(buffers) {
            *b = s.clone();
        }
    }
}

/// Gradients aligned with a store's parameter indices. `None` means the
/// parameter did not participate in the swept graph.
#[derive(Clone)]
pub struct Grads<T: Scalar> {
    pub entries: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads { entries: vec![None; store.len()] }
    }

    pub fn accumulate(&mut self, other: &Grads<T>) -> Result<()> {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if let Some(g) = b {
                match a {
                    Some(t) => t.add_assign(g)?,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: T) {
        for e in self.entries.iter_mut().flatten() {
            e.scale_in_place(c);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries[id.0].as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward/backward session: a fresh tape plus lazily bound parameters.
pub struct Fwd<'s, T: Scalar> {
    pub tape: Tape<T>,
    pub mode: Mode,
    store: &'s mut ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'s, T: Scalar> Fwd<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        let bound = vec![None; store.len()];
        Fwd { tape: Tape::new(), mode, store, bound }
    }

    /// The tape leaf holding this parameter's current value.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn batch_norm(&mut self, layer: &BatchNorm2d, x: Var) -> Result<Var> {
        let gamma = self.param(layer.gamma);
        let beta = self.param(layer.beta);
        let train = self.mode == Mode::Train;
        let stats = &mut self.store.buffers[layer.stats.0].1;
        self.tape.batch_norm2d(
            x,
            gamma,
            beta,
            stats,
            T::from_f64(layer.eps),
            T::from_f64(layer.momentum),
            train,
        )
    }

    /// Run backward from `loss` and collect gradients for bound parameters.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        self.tape.backward(loss)?;
        let mut grads = Grads::zeros_like(self.store);
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                grads.entries[i] = self.tape.grad(*v).cloned();
            }
        }
        Ok(grads)
    }
}

// ---- initialization ----

/// He-normal fan-in initialization.
pub fn init_conv<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    sample_normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

pub fn init_linear<T: Scalar>(rng: &mut ChaCha8Rng, out_f: usize, in_f: usize) -> Tensor<T> {
    sample_normal(rng, &[out_f, in_f], (2.0 / in_f as f64).sqrt())
}

pub fn sample_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let data: Vec<T> = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

pub fn sample_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let data: Vec<T> = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(rng.random_range(lo..hi)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

// ---- layers ----

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str,
        cin: usize, cout: usize, k: usize, stride: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_conv(rng, &[cout, cin, k, k]), ParamKind::Weight);
        Conv2d { w, stride, padding: (k - 1) / 2 }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let w = f.param(self.w);
        f.tape.conv2d(x, w, self.stride, self.padding)
    }
}

#[derive(Clone)]
pub struct DepthwiseConv2d {
    pub w: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl DepthwiseConv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str,
        channels: usize, k: usize, stride: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_conv(rng, &[channels, 1, k, k]), ParamKind::Weight);
        DepthwiseConv2d { w, stride, padding: (k - 1) / 2 }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let w = f.param(self.w);
        f.tape.depthwise_conv2d(x, w, self.stride, self.padding)
    }
}

#[derive(Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    /// `affine = false` freezes gamma/beta at 1/0 (used during search).
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, affine: bool) -> Self {
        let kind = if affine { ParamKind::Weight } else { ParamKind::Frozen };
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), kind);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), kind);
        let stats = store.add_buffer(format!("{name}.stats"), channels);
        BatchNorm2d { gamma, beta, stats, eps: BN_EPS, momentum: BN_MOMENTUM }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        f.batch_norm(self, x)
    }
}

#[derive(Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, in_f: usize, out_f: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_linear(rng, out_f, in_f), ParamKind::Weight);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_f]), ParamKind::Weight);
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let w = f.param(self.w);
        let b = f.param(self.b);
        f.tape.linear(x, w, b)
    }
}

/// ReLU -> k x k conv -> batch norm, the fixed stem/preprocess block.
#[derive(Clone)]
pub struct ReluConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ReluConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str,
        cin: usize, cout: usize, k: usize, stride: usize, affine: bool,
    ) -> Self {
        let conv = Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, k, stride);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), cout, affine);
        ReluConvBn { conv, bn }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let r = f.tape.relu(x);
        let c = self.conv.forward(f, r)?;
        self.bn.forward(f, c)
    }
}

/// ReLU -> depthwise k x k -> pointwise 1 x 1 -> batch norm.
#[derive(Clone)]
pub struct SepConv {
    pub dw: DepthwiseConv2d,
    pub pw: Conv2d,
    pub bn: BatchNorm2d,
}

impl SepConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str,
        cin: usize, cout: usize, k: usize, stride: usize, affine: bool,
    ) -> Result<Self> {
        if !matches!(k, 1 | 3 | 5) {
            return Err(Error::invalid(format!("separable conv kernel {k} not in {{1,3,5}}")));
        }
        let dw = DepthwiseConv2d::new(store, rng, &format!("{name}.dw"), cin, k, stride);
        let pw = Conv2d::new(store, rng, &format!("{name}.pw"), cin, cout, 1, 1);
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), cout, affine);
        Ok(SepConv { dw, pw, bn })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let r = f.tape.relu(x);
        let d = self.dw.forward(f, r)?;
        let p = self.pw.forward(f, d)?;
        self.bn.forward(f, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn params_bind_once_per_session() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(1, "init");
        let lin = Linear::new(&mut store, &mut rng, "head", 4, 2);
        let mut f = Fwd::new(&mut store, Mode::Eval);
        let a = f.param(lin.w);
        let b = f.param(lin.w);
        assert_eq!(a, b);
    }

    #[test]
    fn sep_conv_all_negative_input_gives_beta_map() {
        // ReLU zeroes the input, so the output is the batch-norm shift term.
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(2, "init");
        let sep = SepConv::new(&mut store, &mut rng, "sep", 2, 2, 3, 1, true).unwrap();
        store.value_mut(sep.bn.beta).as_mut_slice().copy_from_slice(&[0.25, -0.75]);
        let mut f = Fwd::new(&mut store, Mode::Train);
        let x = f.tape.constant(Tensor::full(&[1, 2, 3, 3], -1.0));
        let y = sep.forward(&mut f, x).unwrap();
        let ys = f.tape.value(y).as_slice();
        for i in 0..9 {
            assert!((ys[i] - 0.25).abs() < 1e-12);
            assert!((ys[9 + i] + 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn sep_conv_rejects_unsupported_kernel() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(3, "init");
        assert!(SepConv::new(&mut store, &mut rng, "sep", 2, 2, 7, 1, true).is_err());
    }

    #[test]
    fn sep_conv_k1_is_structurally_pointwise() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = substream(4, "init");
        let sep = SepConv::new(&mut store, &mut rng, "sep", 2, 3, 1, 1, true).unwrap();
        assert_eq!(store.value(sep.dw.w).shape(), &[2, 1, 1, 1]);
        assert_eq!(store.value(sep.pw.w).shape(), &[3, 2, 1, 1]);
    }

    #[test]
    fn frozen_bn_params_are_excluded_from_weights() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 4, false);
        assert!(store.ids_of_kind(ParamKind::Weight).is_empty());
        assert_eq!(store.ids_of_kind(ParamKind::Frozen).len(), 2);
        let _ = bn;
    }
}
