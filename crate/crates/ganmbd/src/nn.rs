//! Parameter storage and the layer primitives networks are assembled from.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Flat, named collection of trainable tensors. Networks hold `ParamId`s;
/// the optimizer and checkpointing work directly on the store.
pub struct ParamStore<S: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    requires_grad: Vec<bool>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), requires_grad: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        self.requires_grad.push(true);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        self.requires_grad[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Number of trainable scalars across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Ids of all parameters whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

/// Std-dev used by all weight initializers (DCGAN convention).
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_std(store, name, in_ch, out_ch, k, stride, pad, INIT_STD, rng)
    }

    /// Like `new` but with an explicit weight std (fan-in scaled inits).
    #[allow(clippy::too_many_arguments)]
    pub fn with_std<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn(vec![out_ch, in_ch, k, k], S::from_f64(std), rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_ch]));
        Conv2dLayer { w, b, in_ch, out_ch, k, stride, pad }
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.k * self.k * self.in_ch * self.out_ch + self.out_ch
    }

    /// Weight-only multiply count (the "connections" of the scaling law).
    pub fn connection_count(&self) -> usize {
        self.k * self.k * self.in_ch * self.out_ch
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvT2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT2dLayer {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn(vec![in_ch, out_ch, k, k], S::from_f64(INIT_STD), rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_ch]));
        ConvT2dLayer { w, b, in_ch, out_ch, k, stride, pad }
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.k * self.k * self.in_ch * self.out_ch + self.out_ch
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_f: usize,
    pub out_f: usize,
}

impl DenseLayer {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        in_f: usize,
        out_f: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_std(store, name, in_f, out_f, INIT_STD, rng)
    }

    pub fn with_std<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        in_f: usize,
        out_f: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn(vec![in_f, out_f], S::from_f64(std), rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_f]));
        DenseLayer { w, b, in_f, out_f }
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.dense(x, w, Some(b))
    }

    pub fn param_count(&self) -> usize {
        self.in_f * self.out_f + self.out_f
    }
}

#[derive(Clone, Copy, Debug)]
pub struct InstanceNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub ch: usize,
}

impl InstanceNormLayer {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, ch: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![ch], S::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![ch]));
        InstanceNormLayer { gamma, beta, ch }
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.instance_norm(x, g, b)
    }

    pub fn param_count(&self) -> usize {
        2 * self.ch
    }
}

/// One-hot encode labels into a [N,K] tensor.
pub fn one_hot<S: Scalar>(labels: &[usize], num_classes: usize) -> Result<Tensor<S>> {
    let mut t = Tensor::zeros(vec![labels.len(), num_classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::usage(format!("label index {l} out of range (K = {num_classes})")));
        }
        t.data_mut()[i * num_classes + l] = S::one();
    }
    Ok(t)
}

/// Check that every row of a [N,K] tensor is exactly one-hot.
pub fn validate_one_hot<S: Scalar>(labels: &Tensor<S>, num_classes: usize) -> Result<()> {
    let shape = labels.shape();
    if shape.len() != 2 || shape[1] != num_classes {
        return Err(Error::usage(format!(
            "label tensor must be [N, {num_classes}], got {:?}",
            shape
        )));
    }
    for i in 0..shape[0] {
        let row = &labels.data()[i * num_classes..(i + 1) * num_classes];
        let ones = row.iter().filter(|&&v| v == S::one()).count();
        let zeros = row.iter().filter(|&&v| v == S::zero()).count();
        if ones != 1 || zeros != num_classes - 1 {
            return Err(Error::usage(format!("row {i} of label tensor is not one-hot")));
        }
    }
    Ok(())
}
