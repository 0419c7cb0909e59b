//! Parameter storage and the convolutional building blocks of the network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub(crate) fn register(&mut self, name: String, value: Tensor) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn new(tape: &'t Tape, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }

    /// Accumulated gradient per parameter, zero where backward did not reach.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}

/// Registers parameters with Kaiming-uniform weights and zero biases.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan_in = (cin * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let rng = &mut *self.rng;
        let weight = Tensor::from_fn(&[cout, cin, k, k], |_| rng.gen_range(-bound..bound));
        let weight = self.store.register(format!("{name}.weight"), weight);
        let bias = self.store.register(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv {
            weight,
            bias,
            stride,
            padding: k / 2,
            spec: ConvSpec { cin, cout, k, stride },
        }
    }
}

/// Shape description of a convolution, used for cost accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        (
            (h + 2 * pad - self.k) / self.stride + 1,
            (w + 2 * pad - self.k) / self.stride + 1,
        )
    }
}

/// Same-padded convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p.var(self.weight), p.var(self.bias), self.stride, self.padding)
    }
}

/// `relu(x + conv2(relu(conv1(x))))`
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub(crate) fn build(b: &mut Builder<'_>, name: &str, channels: usize) -> Self {
        Self {
            conv1: b.conv(&format!("{name}.conv1"), channels, channels, 3, 1),
            conv2: b.conv(&format!("{name}.conv2"), channels, channels, 3, 1),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let body = self.conv2.forward(p, &self.conv1.forward(p, x)?.relu()?)?;
        x.add(&body)?.relu()
    }
}

/// Channel attention (shared bottleneck MLP over average- and max-pooled
/// descriptors) followed by spatial attention (7x7 conv over the
/// channel-mean and channel-max planes).
#[derive(Clone, Debug)]
pub struct Cbam {
    pub fc1: Conv,
    pub fc2: Conv,
    pub spatial: Conv,
    channels: usize,
}

impl Cbam {
    pub(crate) fn build(b: &mut Builder<'_>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        Self {
            fc1: b.conv(&format!("{name}.fc1"), channels, hidden, 1, 1),
            fc2: b.conv(&format!("{name}.fc2"), hidden, channels, 1, 1),
            spatial: b.conv(&format!("{name}.spatial"), 2, 1, 7, 1),
            channels,
        }
    }

    fn mlp<'t>(&self, p: &Bound<'t>, v: &Var<'t>) -> Result<Var<'t>> {
        let col = v.reshape(&[self.channels, 1, 1])?;
        self.fc2.forward(p, &self.fc1.forward(p, &col)?.relu()?)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let avg = self.mlp(p, &x.global_avg_pool()?)?;
        let max = self.mlp(p, &x.global_max_pool()?)?;
        let channel_att = avg.add(&max)?.sigmoid()?;
        let x = x.mul(&channel_att)?;
        let pooled = Var::concat_channels(&[&x.channel_mean()?, &x.channel_max()?])?;
        let spatial_att = self.spatial.forward(p, &pooled)?.sigmoid()?;
        x.mul(&spatial_att)
    }
}

/// Residual block whose body output passes through CBAM before the skip-add.
#[derive(Clone, Debug)]
pub struct ResCbam {
    pub conv1: Conv,
    pub conv2: Conv,
    pub cbam: Cbam,
}

impl ResCbam {
    pub(crate) fn build(b: &mut Builder<'_>, name: &str, channels: usize, reduction: usize) -> Self {
        Self {
            conv1: b.conv(&format!("{name}.conv1"), channels, channels, 3, 1),
            conv2: b.conv(&format!("{name}.conv2"), channels, channels, 3, 1),
            cbam: Cbam::build(b, &format!("{name}.cbam"), channels, reduction),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let body = self.conv2.forward(p, &self.conv1.forward(p, x)?.relu()?)?;
        x.add(&self.cbam.forward(p, &body)?)?.relu()
    }
}
