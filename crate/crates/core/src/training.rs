//! Standard training, PGD adversarial training and frozen-head tail
//! finetuning, plus accuracy evaluation.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{fgsm, pgd, AttackConfig, AttackKind};
use crate::autodiff::Tape;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{predicted_classes, LossSpec};
use crate::model::{Network, ParamMode};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Used only by `sgd_momentum`.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            lr: 0.01,
            lr_decay_epochs: vec![20, 40],
            lr_decay_factor: 0.1,
            weight_decay: 5e-4,
            batch_size: 128,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("weight_decay must be >= 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`, after step decays.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }
}

/// Shuffled minibatch index lists covering `0..n`.
pub fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// SGD with optional heavy-ball momentum and L2 weight decay. Frozen layers
/// are never touched.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, net: &Network) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: net
                .layers()
                .iter()
                .map(|l| (vec![0.0; l.weights.numel()], vec![0.0; l.bias.numel()]))
                .collect(),
        }
    }

    /// Applies one step; `grads[l]` holds the `(weights, bias)` gradient of layer `l + 1`.
    pub fn step(&mut self, net: &mut Network, grads: &[(Tensor, Tensor)], lr: f64) -> Result<()> {
        if grads.len() != net.depth() || self.velocity.len() != net.depth() {
            return Err(Error::shape("optimizer step", "gradient count differs from depth"));
        }
        for (l, (gw, gb)) in grads.iter().enumerate() {
            let layer = net.layer_mut(l + 1)?;
            if layer.frozen {
                continue;
            }
            let (vw, vb) = &mut self.velocity[l];
            update(layer.weights.data_mut(), gw.data(), vw, lr, self.kind, self.momentum, self.weight_decay);
            update(layer.bias.data_mut(), gb.data(), vb, lr, self.kind, self.momentum, self.weight_decay);
        }
        Ok(())
    }
}

fn update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, kind: OptimizerKind, mu: f64, wd: f64) {
    for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        let d = gi + wd * *pi;
        match kind {
            OptimizerKind::Sgd => *pi -= lr * d,
            OptimizerKind::SgdMomentum => {
                *vi = mu * *vi + d;
                *pi -= lr * *vi;
            }
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    /// Running accuracy (percent) on the clean minibatches.
    pub clean_acc: f64,
    /// Running accuracy (percent) on the attacked minibatches when training adversarially.
    pub adv_acc: Option<f64>,
    pub lr: f64,
}

pub fn write_json_lines<W: Write>(mut w: W, stats: &[EpochStats]) -> Result<()> {
    for s in stats {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Loss and per-layer parameter gradients on one batch.
pub fn batch_gradients(net: &Network, loss: &LossSpec, x: &Tensor, y: &[usize]) -> Result<(f64, Vec<(Tensor, Tensor)>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = net.full().forward_tape(&mut tape, xv, ParamMode::Trainable)?;
    let l = loss.tape_loss(&mut tape, fwd.output, y)?;
    let value = tape.value(l).data()[0];
    let g = tape.backward(l)?;
    Ok((value, fwd.params.iter().map(|&(w, b)| (g.get(w), g.get(b))).collect()))
}

fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

/// Rounds a percentage to two decimals.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn correct(pred: &[usize], y: &[usize]) -> usize {
    pred.iter().zip(y).filter(|(a, b)| a == b).count()
}

/// One epoch over `data`. With an attack, every minibatch is replaced by PGD
/// examples generated at the current weights before the gradient step.
pub fn run_epoch(
    net: &mut Network,
    data: &Dataset,
    loss: &LossSpec,
    attack: Option<&AttackConfig>,
    cfg: &TrainConfig,
    epoch: usize,
    opt: &mut Optimizer,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let lr = cfg.lr_at(epoch);
    let mut shuffle = rng::seeded(rng::derive(rng::derive(cfg.seed, rng::stream::SHUFFLE), epoch as u64));
    let mut attack_rng = rng::seeded(rng::derive(rng::derive(cfg.seed, rng::stream::ATTACK), epoch as u64));
    let (mut loss_sum, mut clean_ok, mut adv_ok) = (0.0, 0, 0);
    for idx in shuffled_batches(data.len(), cfg.batch_size, &mut shuffle) {
        let x = data.features.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let input = match attack {
            Some(a) => {
                clean_ok += correct(&net.predict(&x)?, &y);
                let p = pgd(net, loss, &x, &y, a, None, &mut attack_rng)?;
                p.apply(&x, a)?
            }
            None => x,
        };
        let (value, grads) = batch_gradients(net, loss, &input, &y)?;
        if !value.is_finite() {
            return Err(Error::Diverged { epoch: epoch + 1, loss: value });
        }
        loss_sum += value * y.len() as f64;
        let pred = predicted_classes(&net.forward(&input)?);
        match attack {
            Some(_) => adv_ok += correct(&pred, &y),
            None => clean_ok += correct(&pred, &y),
        }
        opt.step(net, &grads, lr)?;
    }
    let mean_loss = loss_sum / data.len() as f64;
    if !mean_loss.is_finite() || net.layers().iter().any(|l| l.weights.check_finite("training").is_err()) {
        return Err(Error::Diverged { epoch: epoch + 1, loss: mean_loss });
    }
    Ok(EpochStats {
        epoch: epoch + 1,
        split: data.split,
        loss: mean_loss,
        clean_acc: round2(percent(clean_ok, data.len())),
        adv_acc: attack.map(|_| round2(percent(adv_ok, data.len()))),
        lr,
    })
}

fn train(net: &mut Network, data: &Dataset, loss: &LossSpec, attack: Option<&AttackConfig>, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    loss.validate()?;
    if let Some(a) = attack {
        a.validate()?;
    }
    let mut opt = Optimizer::new(cfg, net);
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let s = run_epoch(net, data, loss, attack, cfg, epoch, &mut opt)?;
        log::debug!("epoch {} loss {:.5} clean {:.2}", s.epoch, s.loss, s.clean_acc);
        stats.push(s);
    }
    Ok(stats)
}

/// SGD on clean data for `cfg.epochs` epochs.
pub fn train_standard(net: &mut Network, data: &Dataset, loss: &LossSpec, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    train(net, data, loss, None, cfg)
}

/// PGD adversarial training for `cfg.epochs` epochs.
pub fn train_adversarial(
    net: &mut Network,
    data: &Dataset,
    loss: &LossSpec,
    attack: &AttackConfig,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    train(net, data, loss, Some(attack), cfg)
}

/// One epoch of adversarial training of the tail; the head must be frozen.
/// `epoch` selects the shuffling and attack streams and the decayed lr.
pub fn finetune_tail(
    net: &mut Network,
    data: &Dataset,
    loss: &LossSpec,
    attack: &AttackConfig,
    cfg: &TrainConfig,
    epoch: usize,
    opt: &mut Optimizer,
) -> Result<EpochStats> {
    let frozen = net.frozen_count();
    if frozen == 0 || frozen == net.depth() {
        return Err(Error::NoFrozenHead);
    }
    run_epoch(net, data, loss, Some(attack), cfg, epoch, opt)
}

/// Full-batch gradient descent on the tail layers `a+1..n` until
/// `‖∇ℓ‖₂ / √P ≤ tol` or `max_steps`; returns the final normalized gradient norm.
pub fn settle_tail(net: &mut Network, a: usize, data: &Dataset, loss: &LossSpec, lr: f64, tol: f64, max_steps: usize) -> Result<f64> {
    let range = a + 1..=net.depth();
    let p = net.param_count(range.clone()) as f64;
    let mut norm = f64::INFINITY;
    for step in 0..=max_steps {
        let (_, grads) = batch_gradients(net, loss, &data.features, &data.labels)?;
        let sq: f64 = grads[a..]
            .iter()
            .map(|(w, b)| w.data().iter().chain(b.data()).map(|v| v * v).sum::<f64>())
            .sum();
        norm = sq.sqrt() / p.sqrt();
        if norm <= tol || step == max_steps {
            break;
        }
        for (l, (gw, gb)) in grads.iter().enumerate().skip(a) {
            let layer = net.layer_mut(l + 1)?;
            for (w, g) in layer.weights.data_mut().iter_mut().zip(gw.data()) {
                *w -= lr * g;
            }
            for (b, g) in layer.bias.data_mut().iter_mut().zip(gb.data()) {
                *b -= lr * g;
            }
        }
    }
    if !norm.is_finite() {
        return Err(Error::NonFinite("settle_tail"));
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccTag {
    #[serde(rename = "Acc")]
    Acc,
    #[serde(rename = "Acc*")]
    AccStar,
    #[serde(rename = "Acc_sr")]
    AccSr,
    #[serde(rename = "Acc_tilde")]
    AccTilde,
    #[serde(rename = "Acc_rand")]
    AccRand,
}

/// An attack used at evaluation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalAttack {
    pub kind: AttackKind,
    #[serde(default)]
    pub config: AttackConfig,
}

impl EvalAttack {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub tag: AccTag,
    pub dataset: String,
    pub epoch: Option<usize>,
    pub samples: usize,
    /// Percent, two decimals.
    pub clean_acc: f64,
    /// Percent of samples classified correctly both clean and under each attack.
    pub adversarial: BTreeMap<String, f64>,
}

impl AccuracyRecord {
    /// Accuracy under the first evaluation attack, or clean accuracy without attacks.
    pub fn headline(&self, attacks: &[EvalAttack]) -> f64 {
        attacks
            .first()
            .and_then(|a| self.adversarial.get(a.name()).copied())
            .unwrap_or(self.clean_acc)
    }
}

pub const EVAL_BATCH: usize = 256;

/// Read-only accuracy over the full split; adversarial examples are
/// regenerated from `seed` on every call.
pub fn evaluate(
    net: &Network,
    data: &Dataset,
    loss: &LossSpec,
    attacks: &[EvalAttack],
    seed: u64,
    tag: AccTag,
) -> Result<AccuracyRecord> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let chunks = data.chunks(EVAL_BATCH);
    let mut clean_ok = vec![false; data.len()];
    for idx in &chunks {
        let x = data.features.select_rows(idx);
        for (&i, p) in idx.iter().zip(net.predict(&x)?) {
            clean_ok[i] = p == data.labels[i];
        }
    }
    let mut adversarial = BTreeMap::new();
    for (k, attack) in attacks.iter().enumerate() {
        let mut r = rng::seeded(rng::derive(rng::derive(seed, rng::stream::EVAL), k as u64));
        let mut ok = 0;
        for idx in &chunks {
            let x = data.features.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let p = match attack.kind {
                AttackKind::Fgsm => fgsm(net, loss, &x, &y, &attack.config)?,
                AttackKind::Pgd => pgd(net, loss, &x, &y, &attack.config, None, &mut r)?,
                AttackKind::Correlation => {
                    return Err(Error::Config("correlation attacks are evaluated through estimate_gamma".into()))
                }
            };
            let pred = net.predict(&p.apply(&x, &attack.config)?)?;
            ok += idx
                .iter()
                .zip(pred)
                .filter(|&(&i, p)| clean_ok[i] && p == data.labels[i])
                .count();
        }
        adversarial.insert(attack.name().to_string(), round2(percent(ok, data.len())));
    }
    Ok(AccuracyRecord {
        tag,
        dataset: data.origin.clone(),
        epoch: None,
        samples: data.len(),
        clean_acc: round2(percent(clean_ok.iter().filter(|&&c| c).count(), data.len())),
        adversarial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::data::{generate_split, DatasetKind, GeneratorParams};

    fn gaussians() -> (Dataset, Dataset) {
        let p = GeneratorParams {
            kind: DatasetKind::TwoGaussians,
            separation: 4.0,
            ..Default::default()
        };
        generate_split(&p, 1000, 1000, 3).unwrap()
    }

    fn mlp(seed: u64) -> Network {
        Network::build(
            &[2, 16, 16, 16, 2],
            &[Activation::Relu, Activation::Relu, Activation::Relu, Activation::Identity],
            seed,
        )
        .unwrap()
    }

    fn short_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr_decay_epochs: vec![],
            optimizer: OptimizerKind::SgdMomentum,
            batch_size: 64,
            ..Default::default()
        }
    }

    #[test]
    fn separable_gaussians_reach_95_percent() {
        let (train, test) = gaussians();
        let mut net = mlp(1);
        let stats = train_standard(&mut net, &train, &LossSpec::cross_entropy(), &short_cfg(20)).unwrap();
        assert_eq!(stats.len(), 20);
        let rec = evaluate(&net, &test, &LossSpec::cross_entropy(), &[], 0, AccTag::Acc).unwrap();
        assert!(rec.clean_acc >= 95.0, "clean accuracy {}", rec.clean_acc);
    }

    #[test]
    fn zero_epochs_leave_network_unchanged() {
        let (train, _) = gaussians();
        let mut net = mlp(2);
        let before = net.clone();
        train_standard(&mut net, &train, &LossSpec::cross_entropy(), &short_cfg(0)).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn training_is_reproducible() {
        let (train, _) = gaussians();
        let (mut a, mut b) = (mlp(3), mlp(3));
        train_standard(&mut a, &train, &LossSpec::cross_entropy(), &short_cfg(2)).unwrap();
        train_standard(&mut b, &train, &LossSpec::cross_entropy(), &short_cfg(2)).unwrap();
        assert_eq!(a.weight_hash(), b.weight_hash());
    }

    #[test]
    fn zero_epsilon_adversarial_training_matches_standard() {
        let (train, _) = gaussians();
        let (mut a, mut b) = (mlp(4), mlp(4));
        let attack = AttackConfig {
            epsilon: 0.0,
            clamp_inputs: false,
            ..Default::default()
        };
        train_standard(&mut a, &train, &LossSpec::cross_entropy(), &short_cfg(2)).unwrap();
        train_adversarial(&mut b, &train, &LossSpec::cross_entropy(), &attack, &short_cfg(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn finetune_needs_frozen_head_and_keeps_it() {
        let (train, _) = gaussians();
        let mut net = mlp(5);
        let cfg = short_cfg(1);
        let attack = AttackConfig { clamp_inputs: false, epsilon: 0.1, step_size: 0.025, ..Default::default() };
        let mut opt = Optimizer::new(&cfg, &net);
        assert!(matches!(
            finetune_tail(&mut net, &train, &LossSpec::cross_entropy(), &attack, &cfg, 0, &mut opt),
            Err(Error::NoFrozenHead)
        ));
        net.freeze_head(2).unwrap();
        let head_before = net.flat_params(1..=2).unwrap();
        let tail_before = net.flat_params(3..=4).unwrap();
        for e in 0..3 {
            let s = finetune_tail(&mut net, &train, &LossSpec::cross_entropy(), &attack, &cfg, e, &mut opt).unwrap();
            assert_eq!(s.epoch, e + 1);
        }
        assert_eq!(net.flat_params(1..=2).unwrap(), head_before);
        assert_ne!(net.flat_params(3..=4).unwrap(), tail_before);
    }

    #[test]
    fn random_net_is_near_chance_and_evaluation_is_read_only() {
        let (_, test) = gaussians();
        let net = mlp(6);
        let hash = net.weight_hash();
        let attacks = [EvalAttack { kind: AttackKind::Pgd, config: AttackConfig { clamp_inputs: false, ..Default::default() } }];
        let a = evaluate(&net, &test, &LossSpec::cross_entropy(), &attacks, 1, AccTag::Acc).unwrap();
        let b = evaluate(&net, &test, &LossSpec::cross_entropy(), &attacks, 1, AccTag::Acc).unwrap();
        assert_eq!(a, b);
        assert_eq!(net.weight_hash(), hash);
        assert!(a.adversarial["pgd"] <= a.clean_acc);
    }

    #[test]
    fn untrained_net_is_at_chance_on_balanced_classes() {
        let mut r = rng::seeded(9);
        let n = 2000;
        let x = Tensor::matrix(n, 2, (0..2 * n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let data = Dataset::new(x, labels, 4, Split::Test).unwrap();
        let net = Network::build(&[2, 16, 16, 4], &[Activation::Relu, Activation::Relu, Activation::Identity], 10).unwrap();
        let acc = evaluate(&net, &data, &LossSpec::cross_entropy(), &[], 0, AccTag::Acc).unwrap().clean_acc;
        assert!((acc - 25.0).abs() <= 5.0, "accuracy {acc}");
    }

    #[test]
    fn lr_schedule_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert!((cfg.lr_at(20) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(59) - 0.0001).abs() < 1e-15);
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_decay_factor: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn settle_reduces_tail_gradient() {
        let (train, _) = gaussians();
        let mut net = mlp(7);
        train_standard(&mut net, &train, &LossSpec::cross_entropy(), &short_cfg(3)).unwrap();
        let head = net.flat_params(1..=2).unwrap();
        let before = settle_tail(&mut net, 2, &train, &LossSpec::cross_entropy(), 0.1, 0.0, 0).unwrap();
        let after = settle_tail(&mut net, 2, &train, &LossSpec::cross_entropy(), 0.1, 0.0, 200).unwrap();
        assert!(after < before);
        assert_eq!(net.flat_params(1..=2).unwrap(), head);
    }
}
