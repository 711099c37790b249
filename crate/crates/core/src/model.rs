//! Feed-forward networks `F^(n)`, contiguous subnetwork views `F^(i,j)` and
//! head/tail splits.
//!
//! Layers are numbered from 1 (the first dense layer) to `n` (the output
//! layer), so layer `j`'s activation is `F^(1,j)(x)`. Weights are stored as
//! `[in, out]` and a batch is a `[rows, features]` tensor.

use std::ops::RangeInclusive;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{dense_values, forward_dense, Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
    #[serde(default)]
    pub frozen: bool,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 || bias.numel() != weights.cols() {
            return Err(Error::shape(
                "dense layer",
                format!("weights {:?}, bias {:?}", weights.shape(), bias.shape()),
            ));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
            frozen: false,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.numel() + self.bias.numel()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        dense_values(&self.weights, &self.bias, input, self.activation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<DenseLayer>,
}

/// How a tape-recorded forward pass treats layer parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    /// Parameters are constants; only the input can carry gradient.
    Constant,
    /// Parameters of non-frozen layers require gradient.
    Trainable,
}

/// Result of a tape-recorded forward pass through a view.
#[derive(Debug)]
pub struct TapeForward {
    pub output: Var,
    /// Output of every layer in the view, in order.
    pub layer_outputs: Vec<Var>,
    /// `(weights, bias)` handles for every layer in the view.
    pub params: Vec<(Var, Var)>,
}

/// Per-layer activations `h_1..h_n` of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations {
    pub layers: Vec<Tensor>,
    /// Whether the batch was adversarially perturbed.
    pub adversarial: bool,
}

impl LayerActivations {
    /// Activation of layer `j` (1-based).
    pub fn layer(&self, j: usize) -> &Tensor {
        &self.layers[j - 1]
    }

    pub fn output(&self) -> &Tensor {
        self.layers.last().expect("at least one layer")
    }
}

impl Network {
    /// He-initialized network with zero biases; `dims` lists the input width
    /// followed by each layer's output width.
    pub fn build(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("a network needs at least one layer (two dims)".into()));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "{} layers need {} activations, got {}",
                dims.len() - 1,
                dims.len() - 1,
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut rng = rng::seeded(rng::derive(seed, rng::stream::INIT));
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
                DenseLayer::new(
                    Tensor::matrix(fan_in, fan_out, data)?,
                    Tensor::zeros(&[fan_out]),
                    act,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Network::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::LayerMismatch {
                    layer: i + 1,
                    out_dim: pair[0].out_dim(),
                    in_dim: pair[1].in_dim(),
                });
            }
        }
        Ok(Network { layers })
    }

    /// Appends `other`'s layers after this network's.
    pub fn chain(self, other: Network) -> Result<Self> {
        let mut layers = self.layers;
        layers.extend(other.layers);
        Network::from_layers(layers)
    }

    /// Number of dense layers `n`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j == 0 || j > self.layers.len() {
            Err(Error::LayerIndex {
                index: j,
                layers: self.layers.len(),
            })
        } else {
            Ok(())
        }
    }

    /// Layer `j` (1-based).
    pub fn layer(&self, j: usize) -> Result<&DenseLayer> {
        self.check_index(j)?;
        Ok(&self.layers[j - 1])
    }

    pub fn layer_mut(&mut self, j: usize) -> Result<&mut DenseLayer> {
        self.check_index(j)?;
        Ok(&mut self.layers[j - 1])
    }

    /// View `F^(first,last)` over layers `first..=last`.
    pub fn view(&self, first: usize, last: usize) -> Result<SubnetworkView<'_>> {
        self.check_index(first)?;
        self.check_index(last)?;
        if first > last {
            return Err(Error::Config(format!("empty view F^({first},{last})")));
        }
        Ok(SubnetworkView {
            net: self,
            first,
            last,
        })
    }

    pub fn full(&self) -> SubnetworkView<'_> {
        SubnetworkView {
            net: self,
            first: 1,
            last: self.layers.len(),
        }
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.full().forward(batch)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(crate::loss::predicted_classes(&self.forward(batch)?))
    }

    /// Activations of every layer for `batch`; the last entry is the network output.
    pub fn forward_collect(&self, batch: &Tensor, adversarial: bool) -> Result<LayerActivations> {
        if batch.cols() != self.input_dim() || batch.shape().len() != 2 {
            return Err(Error::shape(
                "forward_collect",
                format!("batch {:?} for input width {}", batch.shape(), self.input_dim()),
            ));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut h = batch.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
            layers.push(h.clone());
        }
        Ok(LayerActivations {
            layers,
            adversarial,
        })
    }

    /// Marks layers `1..=a` frozen and the rest trainable.
    pub fn freeze_head(&mut self, a: usize) -> Result<()> {
        SubnetworkSplit::new(a, self.depth())?;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.frozen = i < a;
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.layers.iter_mut().for_each(|l| l.frozen = false);
    }

    pub fn frozen_count(&self) -> usize {
        self.layers.iter().filter(|l| l.frozen).count()
    }

    pub fn param_count(&self, layers: RangeInclusive<usize>) -> usize {
        layers.map(|j| self.layers[j - 1].param_count()).sum()
    }

    /// Parameters of the given layers flattened as `[W_i, b_i, W_{i+1}, ...]`.
    pub fn flat_params(&self, layers: RangeInclusive<usize>) -> Result<Vec<f64>> {
        self.check_index(*layers.start())?;
        self.check_index(*layers.end())?;
        let mut out = Vec::new();
        for j in layers {
            let l = &self.layers[j - 1];
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(l.bias.data());
        }
        Ok(out)
    }

    /// Inverse of [`Network::flat_params`].
    pub fn set_flat_params(&mut self, layers: RangeInclusive<usize>, values: &[f64]) -> Result<()> {
        self.check_index(*layers.start())?;
        self.check_index(*layers.end())?;
        let expected = self.param_count(layers.clone());
        if values.len() != expected {
            return Err(Error::shape(
                "set_flat_params",
                format!("expected {expected} values, got {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("set_flat_params"));
        }
        let mut off = 0;
        for j in layers {
            let l = &mut self.layers[j - 1];
            let w = l.weights.numel();
            l.weights.data_mut().copy_from_slice(&values[off..off + w]);
            off += w;
            let b = l.bias.numel();
            l.bias.data_mut().copy_from_slice(&values[off..off + b]);
            off += b;
        }
        Ok(())
    }

    /// SHA-256 over every parameter's little-endian bytes.
    pub fn weight_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.weights.data().iter().chain(l.bias.data()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Errors unless layers `1..=a` are bit-identical in both networks.
    pub fn ensure_same_head(&self, other: &Network, a: usize) -> Result<()> {
        if self.depth() != other.depth() {
            return Err(Error::Config("networks differ in depth".into()));
        }
        for j in 1..=a {
            let (x, y) = (&self.layers[j - 1], &other.layers[j - 1]);
            if x.weights != y.weights || x.bias != y.bias {
                return Err(Error::HeadMismatch(j));
            }
        }
        Ok(())
    }

    /// Copies the parameters of layers `a+1..=n` from `source`.
    pub fn load_tail_from(&mut self, source: &Network, a: usize) -> Result<()> {
        SubnetworkSplit::new(a, self.depth())?;
        if source.depth() != self.depth() {
            return Err(Error::Config("networks differ in depth".into()));
        }
        for j in a + 1..=self.depth() {
            let (dst, src) = (&mut self.layers[j - 1], &source.layers[j - 1]);
            if dst.weights.shape() != src.weights.shape() {
                return Err(Error::shape("load_tail_from", format!("layer {j} shapes differ")));
            }
            dst.weights = src.weights.clone();
            dst.bias = src.bias.clone();
        }
        Ok(())
    }
}

/// Contiguous slice `F^(first,last)` of a network; borrows, never copies.
#[derive(Clone, Copy, Debug)]
pub struct SubnetworkView<'a> {
    net: &'a Network,
    first: usize,
    last: usize,
}

impl<'a> SubnetworkView<'a> {
    pub fn first(&self) -> usize {
        self.first
    }

    pub fn last(&self) -> usize {
        self.last
    }

    pub fn network(&self) -> &'a Network {
        self.net
    }

    pub fn layers(&self) -> &'a [DenseLayer] {
        &self.net.layers[self.first - 1..self.last]
    }

    pub fn input_dim(&self) -> usize {
        self.layers()[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers().last().expect("non-empty view").out_dim()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut layers = self.layers().iter();
        let first = layers.next().expect("non-empty view");
        let mut h = first.forward(input)?;
        for l in layers {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward_tape(&self, tape: &mut Tape, input: Var, mode: ParamMode) -> Result<TapeForward> {
        let mut h = input;
        let mut layer_outputs = Vec::with_capacity(self.last - self.first + 1);
        let mut params = Vec::with_capacity(self.last - self.first + 1);
        for l in self.layers() {
            let trainable = mode == ParamMode::Trainable && !l.frozen;
            let w = tape.leaf(l.weights.clone(), trainable);
            let b = tape.leaf(l.bias.clone(), trainable);
            h = forward_dense(tape, w, b, h, l.activation)?;
            layer_outputs.push(h);
            params.push((w, b));
        }
        Ok(TapeForward {
            output: h,
            layer_outputs,
            params,
        })
    }
}

/// Split of an `n`-layer network into head `f_a = F^(1,a)` and tail `f_b = F^(a+1,n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubnetworkSplit {
    pub a: usize,
    pub n: usize,
}

impl SubnetworkSplit {
    pub fn new(a: usize, n: usize) -> Result<Self> {
        if a == 0 || a >= n {
            return Err(Error::Config(format!(
                "split a={a} must satisfy 1 <= a < n={n}"
            )));
        }
        Ok(SubnetworkSplit { a, n })
    }

    pub fn head_layers(&self) -> RangeInclusive<usize> {
        1..=self.a
    }

    pub fn tail_layers(&self) -> RangeInclusive<usize> {
        self.a + 1..=self.n
    }

    /// Number of trainable layers in the tail.
    pub fn tail_len(&self) -> usize {
        self.n - self.a
    }

    pub fn head<'a>(&self, net: &'a Network) -> Result<SubnetworkView<'a>> {
        net.view(1, self.a)
    }

    pub fn tail<'a>(&self, net: &'a Network) -> Result<SubnetworkView<'a>> {
        net.view(self.a + 1, self.n)
    }
}
