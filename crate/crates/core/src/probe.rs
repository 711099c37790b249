//! Probe heads `G_j` mapping a layer's activation space to label scores.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{forward_dense, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{DenseLayer, Network};
use crate::rng;
use crate::tensor::Tensor;
use crate::training::shuffled_batches;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProbeMap {
    /// The layer's activations are the scores (output layer).
    Identity,
    /// Linear-softmax head `h · W + b`.
    Linear { weights: Tensor, bias: Tensor },
    /// Network layers applied before another probe, i.e. `G ∘ f^(j)`.
    Composed {
        layers: Vec<DenseLayer>,
        then: Box<ProbeMap>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    /// Layer index `j` whose activations the probe reads.
    pub layer: usize,
    pub map: ProbeMap,
    pub trained: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            epochs: 200,
            lr: 0.05,
            batch_size: 64,
            momentum: 0.9,
        }
    }
}

impl ProbeHead {
    pub fn identity(layer: usize) -> Self {
        ProbeHead {
            layer,
            map: ProbeMap::Identity,
            trained: true,
        }
    }

    pub fn linear(layer: usize, weights: Tensor, bias: Tensor) -> Result<Self> {
        if bias.numel() != weights.cols() {
            return Err(Error::shape("probe", "bias width differs from weight columns"));
        }
        Ok(ProbeHead {
            layer,
            map: ProbeMap::Linear { weights, bias },
            trained: true,
        })
    }

    /// Zero-initialized linear probe that estimators refuse until trained.
    pub fn untrained(layer: usize, in_dim: usize, classes: usize) -> Self {
        ProbeHead {
            layer,
            map: ProbeMap::Linear {
                weights: Tensor::zeros(&[in_dim, classes]),
                bias: Tensor::zeros(&[classes]),
            },
            trained: false,
        }
    }

    /// `G_{j−1} := G_j ∘ f^(j)` for this probe at layer `j`.
    pub fn compose_through(&self, net: &Network) -> Result<ProbeHead> {
        if self.layer < 2 {
            return Err(Error::LayerIndex {
                index: self.layer.saturating_sub(1),
                layers: net.depth(),
            });
        }
        let layer = net.layer(self.layer)?.clone();
        let map = match &self.map {
            ProbeMap::Composed { layers, then } => {
                let mut ls = vec![layer];
                ls.extend(layers.iter().cloned());
                ProbeMap::Composed {
                    layers: ls,
                    then: then.clone(),
                }
            }
            other => ProbeMap::Composed {
                layers: vec![layer],
                then: Box::new(other.clone()),
            },
        };
        Ok(ProbeHead {
            layer: self.layer - 1,
            map,
            trained: self.trained,
        })
    }

    pub fn scores(&self, acts: &Tensor) -> Result<Tensor> {
        map_scores(&self.map, acts)
    }

    pub fn scores_tape(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        map_scores_tape(&self.map, tape, h)
    }

    /// Content hash identifying the probe in reports.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.layer as u64).to_le_bytes());
        h.update(serde_json::to_vec(&self.map).unwrap_or_default());
        hex::encode(&h.finalize()[..8])
    }
}

fn map_scores(map: &ProbeMap, acts: &Tensor) -> Result<Tensor> {
    match map {
        ProbeMap::Identity => Ok(acts.clone()),
        ProbeMap::Linear { weights, bias } => {
            crate::autodiff::dense_values(weights, bias, acts, crate::autodiff::Activation::Identity)
        }
        ProbeMap::Composed { layers, then } => {
            let mut h = acts.clone();
            for l in layers {
                h = l.forward(&h)?;
            }
            map_scores(then, &h)
        }
    }
}

fn map_scores_tape(map: &ProbeMap, tape: &mut Tape, h: Var) -> Result<Var> {
    match map {
        ProbeMap::Identity => Ok(h),
        ProbeMap::Linear { weights, bias } => {
            let w = tape.constant(weights.clone());
            let b = tape.constant(bias.clone());
            forward_dense(tape, w, b, h, crate::autodiff::Activation::Identity)
        }
        ProbeMap::Composed { layers, then } => {
            let mut cur = h;
            for l in layers {
                let w = tape.constant(l.weights.clone());
                let b = tape.constant(l.bias.clone());
                cur = forward_dense(tape, w, b, cur, l.activation)?;
            }
            map_scores_tape(then, tape, cur)
        }
    }
}

/// Normalized margin `m / (1 + |m|)` in (−1, 1); positive iff correct.
pub fn normalized_margin(m: f64) -> f64 {
    m / (1.0 + m.abs())
}

/// Raw per-row margins of `scores` against `labels`, see [`Tape::margin`].
pub fn margins(scores: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let m = tape.margin(s, labels)?;
    Ok(tape.value(m).data().to_vec())
}

/// Trains a linear-softmax probe on gradient-blocked activations of layer `j`.
/// For the output layer the probe is the identity map.
pub fn train_probe(
    net: &Network,
    j: usize,
    data: &Dataset,
    cfg: &ProbeTrainConfig,
    seed: u64,
) -> Result<ProbeHead> {
    net.layer(j)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if j == net.depth() {
        return Ok(ProbeHead::identity(j));
    }
    let acts = net.view(1, j)?.forward(&data.features)?;
    train_linear_probe(j, &acts, &data.labels, data.num_classes, cfg, seed)
}

/// Softmax regression on fixed features with minibatch momentum SGD.
pub fn train_linear_probe(
    layer: usize,
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeTrainConfig,
    seed: u64,
) -> Result<ProbeHead> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = features.cols();
    let mut weights = Tensor::zeros(&[d, classes]);
    let mut bias = Tensor::zeros(&[classes]);
    let mut vw = vec![0.0; d * classes];
    let mut vb = vec![0.0; classes];
    let mut shuffle = rng::seeded(rng::derive(seed, rng::stream::PROBE));
    for _ in 0..cfg.epochs {
        for idx in shuffled_batches(labels.len(), cfg.batch_size.max(1), &mut shuffle) {
            let xb = features.select_rows(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(xb);
            let w = tape.param(weights.clone());
            let b = tape.param(bias.clone());
            let s = forward_dense(&mut tape, w, b, x, crate::autodiff::Activation::Identity)?;
            let loss = tape.softmax_cross_entropy(s, &yb)?;
            let g = tape.backward(loss)?;
            for (p, (v, gr)) in weights
                .data_mut()
                .iter_mut()
                .zip(vw.iter_mut().zip(g.get(w).data()))
            {
                *v = cfg.momentum * *v + gr;
                *p -= cfg.lr * *v;
            }
            for (p, (v, gr)) in bias.data_mut().iter_mut().zip(vb.iter_mut().zip(g.get(b).data())) {
                *v = cfg.momentum * *v + gr;
                *p -= cfg.lr * *v;
            }
        }
    }
    weights.check_finite("probe training")?;
    ProbeHead::linear(layer, weights, bias)
}
