//! The two experiment protocols: learning the layer-dependency thresholds ρ
//! by finetuning a non-robust tail behind a frozen robust head, and solving
//! for the linear maps λ that predict the output from head activations.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackConfig;
use crate::autodiff::Activation;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{predicted_classes, LossSpec};
use crate::lstsq::ridge_solve;
use crate::metrics::{attacked_activations, layer_dependencies, LayerDependency};
use crate::mi::MiConfig;
use crate::model::{DenseLayer, Network, SubnetworkSplit};
use crate::rng;
use crate::tensor::Tensor;
use crate::attacks::AttackKind;
use crate::training::{finetune_tail, round2, train_adversarial, train_standard, EpochStats, Optimizer, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    /// Input width followed by each layer's output width.
    pub dims: Vec<usize>,
    /// One per layer; empty means ReLU everywhere except an identity output layer.
    pub activations: Vec<Activation>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            dims: vec![11, 32, 32, 32, 32, 32, 2],
            activations: Vec::new(),
        }
    }
}

impl NetworkSpec {
    /// ReLU everywhere except an identity output layer.
    pub fn mlp(dims: &[usize]) -> Self {
        NetworkSpec {
            dims: dims.to_vec(),
            activations: Vec::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.dims.len().saturating_sub(1)
    }

    pub fn resolved_activations(&self) -> Vec<Activation> {
        if !self.activations.is_empty() {
            return self.activations.clone();
        }
        let mut acts = vec![Activation::Relu; self.depth()];
        if let Some(last) = acts.last_mut() {
            *last = Activation::Identity;
        }
        acts
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth() == 0 || self.dims.contains(&0) {
            return Err(Error::Config(format!("network dims {:?} need two or more positive widths", self.dims)));
        }
        if !self.activations.is_empty() && self.activations.len() != self.depth() {
            return Err(Error::Config(format!(
                "{} layers need {} activations, got {}",
                self.depth(),
                self.depth(),
                self.activations.len()
            )));
        }
        Ok(())
    }

    pub fn build(&self, seed: u64) -> Result<Network> {
        Network::build(&self.dims, &self.resolved_activations(), seed)
    }

    /// Short label such as `MLP[11-32-2]`.
    pub fn label(&self) -> String {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        format!("MLP[{}]", dims.join("-"))
    }
}

/// Starting weights for adversarial training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustInit {
    /// Independent initialization drawn from its own seed.
    Fresh,
    /// Continue from the regularly trained weights.
    FromStandard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RhoLearningConfig {
    /// Trials `T`.
    pub trials: usize,
    /// Maximum finetuning epochs `E` per trial.
    pub max_epochs: usize,
    /// Accuracy slack `k` in percentage points.
    pub k: f64,
    /// Head size `a`; set from the experiment, not read from its own table.
    #[serde(skip)]
    pub a: usize,
    pub finetune_lr: f64,
    pub robust_init: RobustInit,
    /// Evaluate on the first `n` test samples only.
    pub eval_limit: Option<usize>,
}

impl Default for RhoLearningConfig {
    fn default() -> Self {
        RhoLearningConfig {
            trials: 10,
            max_epochs: 10,
            k: 1.0,
            a: 1,
            finetune_lr: 0.001,
            robust_init: RobustInit::Fresh,
            eval_limit: None,
        }
    }
}

impl RhoLearningConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.trials == 0 || self.max_epochs == 0 {
            return Err(Error::Config("trials and max_epochs must be >= 1".into()));
        }
        if self.k.is_nan() || self.k < 0.0 {
            return Err(Error::Config(format!("k must be >= 0, got {}", self.k)));
        }
        if self.finetune_lr.is_nan() || self.finetune_lr <= 0.0 {
            return Err(Error::Config("finetune_lr must be > 0".into()));
        }
        SubnetworkSplit::new(self.a, depth).map(|_| ())
    }
}

/// Everything ρ learning needs besides the two pretrained networks.
#[derive(Clone, Debug)]
pub struct RhoSetup<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub loss: LossSpec,
    pub train_cfg: &'a TrainConfig,
    pub train_attack: &'a AttackConfig,
    /// PGD configuration used for every adversarial accuracy and MI measurement.
    pub eval_attack: &'a AttackConfig,
    pub mi: &'a MiConfig,
    pub rho: &'a RhoLearningConfig,
    pub seed: u64,
}

/// Standard network `(f_a, f_b)` and the adversarially trained `(f_a*, f_b*)`.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub standard: Network,
    pub robust: Network,
    pub standard_log: Vec<EpochStats>,
    pub robust_log: Vec<EpochStats>,
}

/// Regular training, then adversarial training of a second network.
pub fn pretrain(spec: &NetworkSpec, setup: &RhoSetup<'_>) -> Result<Pretrained> {
    let mut standard = spec.build(setup.seed)?;
    let std_cfg = TrainConfig {
        seed: rng::derive(setup.seed, 11),
        ..setup.train_cfg.clone()
    };
    let standard_log = train_standard(&mut standard, setup.train, &setup.loss, &std_cfg).map_err(|e| e.in_phase("standard training"))?;
    let mut robust = match setup.rho.robust_init {
        RobustInit::Fresh => spec.build(rng::derive(setup.seed, 13))?,
        RobustInit::FromStandard => standard.clone(),
    };
    let adv_cfg = TrainConfig {
        seed: rng::derive(setup.seed, 12),
        ..setup.train_cfg.clone()
    };
    let robust_log = train_adversarial(&mut robust, setup.train, &setup.loss, setup.train_attack, &adv_cfg)
        .map_err(|e| e.in_phase("adversarial training"))?;
    Ok(Pretrained {
        standard,
        robust,
        standard_log,
        robust_log,
    })
}

/// Accuracy and layer dependencies of one network state on attacked test data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub epoch: usize,
    /// Percent correct on clean inputs.
    pub clean_acc: f64,
    /// Percent correct on both the clean and the attacked input.
    pub adv_acc: f64,
    /// `I_{j,t}` for `j = a+1..=n`.
    pub mi: BTreeMap<usize, f64>,
    pub raw_mi: BTreeMap<usize, f64>,
}

/// Attacks `data` once with PGD and measures accuracy and `I_{j}` on the result;
/// the MI path is the one [`crate::metrics::a1_diagnostic`] uses.
#[allow(clippy::too_many_arguments)]
pub fn measure(
    net: &Network,
    split: &SubnetworkSplit,
    data: &Dataset,
    loss: &LossSpec,
    attack: &AttackConfig,
    mi: &MiConfig,
    seed: u64,
    epoch: usize,
) -> Result<Measurement> {
    let acts = attacked_activations(net, data, loss, Some(attack), seed)?;
    let clean_pred = net.predict(&data.features)?;
    let adv_pred = predicted_classes(acts.output());
    let n = data.len() as f64;
    let clean_ok: Vec<bool> = clean_pred.iter().zip(&data.labels).map(|(p, y)| p == y).collect();
    let adv_ok = adv_pred
        .iter()
        .zip(&data.labels)
        .zip(&clean_ok)
        .filter(|((p, y), &c)| c && p == y)
        .count();
    let deps: Vec<LayerDependency> = layer_dependencies(&acts, &data.labels, split, mi)?;
    Ok(Measurement {
        epoch,
        clean_acc: round2(100.0 * clean_ok.iter().filter(|&&c| c).count() as f64 / n),
        adv_acc: round2(100.0 * adv_ok as f64 / n),
        mi: deps.iter().map(|d| (d.layer, d.rho_hat)).collect(),
        raw_mi: deps.iter().map(|d| (d.layer, d.raw_rho)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    /// One entry per finetuning epoch, starting at epoch 1.
    pub epochs: Vec<Measurement>,
    pub converged: bool,
    /// Set when the trial aborted on a diverging loss; such trials are excluded.
    pub failure: Option<String>,
    /// SHA-256 of every weight at the end of the trial.
    pub final_weight_hash: String,
    pub head_hash: String,
}

impl TrialRecord {
    /// `I_{j,t}` after the trial's last epoch.
    pub fn final_mi(&self) -> Option<&BTreeMap<usize, f64>> {
        self.epochs.last().map(|m| &m.mi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoReport {
    pub network: String,
    pub dataset: String,
    pub a: usize,
    pub depth: usize,
    pub k: f64,
    /// Standard network `(f_a, f_b)`.
    pub acc_standard: Measurement,
    /// Adversarially trained `(f_a*, f_b*)`.
    pub acc_star_record: Measurement,
    /// `Acc*` (adversarial).
    pub acc_star: f64,
    /// Adversarial accuracy of `(f_a*, f_b)` before finetuning; its MI values are the A1 diagnostic.
    pub initial: Measurement,
    pub acc_sr: f64,
    /// Largest `Acc_t^e` over all trials and epochs.
    pub acc_tilde: f64,
    /// `Ãcc − Acc*`
    pub diff: f64,
    /// Mean epochs to converge over converged trials.
    pub mean_epochs: Option<f64>,
    /// `ρ_j` for `j = a+1..=n`.
    pub rho: BTreeMap<usize, f64>,
    /// Present when no trial converged and `rho` holds the largest observed values.
    pub approximation: Option<String>,
    pub converged_mask: Vec<bool>,
    pub trials: Vec<TrialRecord>,
}

pub const NO_TRIAL_CONVERGED: &str = "no trial converged";

fn eval_subset(test: &Dataset, limit: Option<usize>) -> Result<Dataset> {
    match limit {
        Some(l) if l < test.len() => test.subset(&(0..l).collect::<Vec<_>>()),
        _ => Ok(test.clone()),
    }
}

/// Runs the trials on pretrained networks.
pub fn algorithm1_trials(spec: &NetworkSpec, pre: &Pretrained, setup: &RhoSetup<'_>) -> Result<RhoReport> {
    let depth = pre.robust.depth();
    let rho_cfg = setup.rho;
    rho_cfg.validate(depth)?;
    let a = rho_cfg.a;
    let split = SubnetworkSplit::new(a, depth)?;
    let test = eval_subset(setup.test, rho_cfg.eval_limit)?;
    let eval_seed = rng::derive(setup.seed, rng::stream::EVAL);
    let m = |net: &Network, seed: u64, epoch: usize| measure(net, &split, &test, &setup.loss, setup.eval_attack, setup.mi, seed, epoch);

    let acc_standard = m(&pre.standard, eval_seed, 0)?;
    let acc_star_record = m(&pre.robust, eval_seed, 0)?;
    let acc_star = acc_star_record.adv_acc;

    let mut semirobust = pre.robust.clone();
    semirobust.load_tail_from(&pre.standard, a)?;
    semirobust.unfreeze_all();
    semirobust.freeze_head(a)?;
    let initial = m(&semirobust, eval_seed, 0)?;
    let expected_head = head_hash(&semirobust, a)?;

    let mut trials = Vec::with_capacity(rho_cfg.trials);
    for t in 0..rho_cfg.trials {
        let seed = rng::derive(setup.seed, rng::stream::TRIAL + t as u64);
        let cfg = TrainConfig {
            lr: rho_cfg.finetune_lr,
            lr_decay_epochs: Vec::new(),
            epochs: rho_cfg.max_epochs,
            seed,
            ..setup.train_cfg.clone()
        };
        let mut net = semirobust.clone();
        let mut opt = Optimizer::new(&cfg, &net);
        let mut epochs = Vec::new();
        let mut converged = false;
        let mut failure = None;
        for e in 0..rho_cfg.max_epochs {
            let step = finetune_tail(&mut net, setup.train, &setup.loss, setup.train_attack, &cfg, e, &mut opt)
                .and_then(|_| m(&net, rng::derive(seed, e as u64 + 1), e + 1));
            match step {
                Ok(meas) => {
                    let acc = meas.adv_acc;
                    log::info!("trial {t} epoch {} adv acc {acc:.2} (Acc* {acc_star:.2})", e + 1);
                    epochs.push(meas);
                    if acc_star - acc <= rho_cfg.k {
                        converged = true;
                        break;
                    }
                }
                Err(err) => {
                    log::warn!("trial {t} failed: {err}");
                    failure = Some(err.to_string());
                    break;
                }
            }
        }
        let trial_head = head_hash(&net, a)?;
        if trial_head != expected_head {
            return Err(Error::Config(format!("head weights changed during trial {t}")));
        }
        trials.push(TrialRecord {
            trial: t,
            seed,
            epochs,
            converged: converged && failure.is_none(),
            failure,
            final_weight_hash: net.weight_hash(),
            head_hash: trial_head,
        });
    }
    aggregate(spec, setup, depth, a, acc_standard, acc_star_record, initial, trials)
}

fn head_hash(net: &Network, a: usize) -> Result<String> {
    let params = net.flat_params(1..=a)?;
    let bytes: Vec<u8> = params.iter().flat_map(|p| p.to_le_bytes()).collect();
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[allow(clippy::too_many_arguments)]
fn aggregate(
    spec: &NetworkSpec,
    setup: &RhoSetup<'_>,
    depth: usize,
    a: usize,
    acc_standard: Measurement,
    acc_star_record: Measurement,
    initial: Measurement,
    trials: Vec<TrialRecord>,
) -> Result<RhoReport> {
    let acc_star = acc_star_record.adv_acc;
    let acc_tilde = trials
        .iter()
        .flat_map(|t| t.epochs.iter().map(|m| m.adv_acc))
        .fold(f64::NEG_INFINITY, f64::max);
    let acc_tilde = if acc_tilde.is_finite() { acc_tilde } else { initial.adv_acc };
    let converged_mask: Vec<bool> = trials.iter().map(|t| t.converged).collect();
    let converged: Vec<&TrialRecord> = trials.iter().filter(|t| t.converged).collect();
    let mean_epochs = if converged.is_empty() {
        None
    } else {
        Some(converged.iter().map(|t| t.epochs.len() as f64).sum::<f64>() / converged.len() as f64)
    };
    let (pool, pick_min, approximation): (Vec<&TrialRecord>, bool, Option<String>) = if converged.is_empty() {
        (
            trials.iter().filter(|t| t.failure.is_none()).collect(),
            false,
            Some(NO_TRIAL_CONVERGED.to_string()),
        )
    } else {
        (converged, true, None)
    };
    let mut rho = BTreeMap::new();
    for j in a + 1..=depth {
        let vals = pool.iter().filter_map(|t| t.final_mi().and_then(|m| m.get(&j)).copied());
        let v = if pick_min {
            vals.fold(f64::INFINITY, f64::min)
        } else {
            vals.fold(f64::NEG_INFINITY, f64::max)
        };
        if v.is_finite() {
            rho.insert(j, v);
        }
    }
    Ok(RhoReport {
        network: spec.label(),
        dataset: setup.test.origin.clone(),
        a,
        depth,
        k: setup.rho.k,
        acc_standard,
        acc_star,
        acc_star_record,
        acc_sr: initial.adv_acc,
        initial,
        acc_tilde,
        diff: round2(acc_tilde - acc_star),
        mean_epochs,
        rho,
        approximation,
        converged_mask,
        trials,
    })
}

/// Full protocol: pretraining followed by the trials.
pub fn algorithm1(spec: &NetworkSpec, setup: &RhoSetup<'_>) -> Result<(RhoReport, Pretrained)> {
    let pre = pretrain(spec, setup)?;
    let report = algorithm1_trials(spec, &pre, setup)?;
    Ok((report, pre))
}

impl RhoReport {
    pub const TABLE_HEADER: &'static str = "Network,Dataset,#f_b,Acc*,Acc_sr,Ãcc,Diff,#Epochs,ρ_n,ρ_{n−3},ρ_{n−7},ρ_{n−11}";

    /// `ρ` for layer `n − offset`, when that layer is in the tail.
    pub fn rho_at_offset(&self, offset: usize) -> Option<f64> {
        self.depth.checked_sub(offset).and_then(|j| self.rho.get(&j).copied())
    }

    /// One table row; layers outside the tail are written as `-`.
    pub fn table_row(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let epochs = self.mean_epochs.map_or_else(|| "-".to_string(), |e| format!("{e:.1}"));
        format!(
            "{},{},{},{:.2},{:.2},{:.2},{:.2},{},{},{},{},{}",
            self.network,
            self.dataset.replace(',', ";"),
            self.depth - self.a,
            self.acc_star,
            self.acc_sr,
            self.acc_tilde,
            self.diff,
            epochs,
            cell(self.rho_at_offset(0)),
            cell(self.rho_at_offset(3)),
            cell(self.rho_at_offset(7)),
            cell(self.rho_at_offset(11)),
        )
    }
}

pub fn table1_csv(reports: &[RhoReport]) -> String {
    let mut s = String::from(RhoReport::TABLE_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.table_row());
        s.push('\n');
    }
    s
}

/// Head activations `h_1..h_a` concatenated column-wise.
pub fn head_features(net: &Network, a: usize, x: &Tensor) -> Result<Tensor> {
    let acts = net.forward_collect(x, false)?;
    let parts: Vec<&Tensor> = (1..=a).map(|i| acts.layer(i)).collect();
    Tensor::hcat(&parts)
}

/// `Σ_i h_i · λ_i`; `head[i]` is `h_{i+1}` and `lambda[i]` is `[dim(h_{i+1}), classes]`.
pub fn lincomb_predict(head: &[&Tensor], lambda: &[Tensor]) -> Result<Tensor> {
    if head.len() != lambda.len() || head.is_empty() {
        return Err(Error::shape("lincomb_predict", format!("{} activations, {} maps", head.len(), lambda.len())));
    }
    let mut acc: Option<Tensor> = None;
    for (h, l) in head.iter().zip(lambda) {
        let s = h.matmul(l)?;
        acc = Some(match acc {
            None => s,
            Some(a) => a.zip_map(&s, |u, v| u + v)?,
        });
    }
    Ok(acc.expect("at least one layer"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaConfig {
    /// Head size `a`; set from the experiment, not read from its own table.
    #[serde(skip)]
    pub a: usize,
    pub ridge: f64,
    pub batch_size: usize,
    /// Random-λ draws averaged into `Acc_rand`.
    pub random_draws: usize,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        LambdaConfig {
            a: 1,
            ridge: 1e-6,
            batch_size: 512,
            random_draws: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaEval {
    /// Which inputs were scored, e.g. `clean` or `pgd`.
    pub inputs: String,
    /// Accuracy of the full network on the same inputs.
    pub acc_network: f64,
    pub acc_tilde: f64,
    pub acc_rand: f64,
    /// Fraction of samples where the linear prediction's argmax matches the network's.
    pub argmax_agreement: f64,
    /// Max |linear score − network output|.
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSolution {
    /// `λ_i*`, one `[dim(h_i), classes]` block per head layer.
    pub lambda: Vec<Tensor>,
    /// Number of batches `K`.
    pub batches: usize,
    pub ridge: f64,
    /// Batches whose zero ridge had to be raised.
    pub ridge_bumped: usize,
    pub max_batch_residual: f64,
    pub evaluations: Vec<LambdaEval>,
}

/// Solves `min ‖F*_{a,k} λ − F_k^(n)‖² + ridge‖λ‖²` per batch and averages the solutions.
pub fn algorithm2(net: &Network, train: &Dataset, cfg: &LambdaConfig) -> Result<LambdaSolution> {
    SubnetworkSplit::new(cfg.a, net.depth())?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let widths: Vec<usize> = net.layers()[..cfg.a].iter().map(|l| l.out_dim()).collect();
    let total: usize = widths.iter().sum();
    let classes = net.num_classes();
    let mut sum = vec![0.0; total * classes];
    let mut batches = 0;
    let mut bumped = 0;
    let mut max_res: f64 = 0.0;
    for idx in train.chunks(cfg.batch_size) {
        let x = train.features.select_rows(&idx);
        let acts = net.forward_collect(&x, false)?;
        let parts: Vec<&Tensor> = (1..=cfg.a).map(|i| acts.layer(i)).collect();
        let a_k = Tensor::hcat(&parts)?;
        let s = ridge_solve(&a_k, acts.output(), cfg.ridge)?;
        bumped += usize::from(s.bumped);
        max_res = max_res.max(s.residual);
        for (acc, v) in sum.iter_mut().zip(s.x.data()) {
            *acc += v;
        }
        batches += 1;
    }
    let mean: Vec<f64> = sum.iter().map(|v| v / batches as f64).collect();
    let mut lambda = Vec::with_capacity(cfg.a);
    let mut row = 0;
    for w in widths {
        lambda.push(Tensor::matrix(w, classes, mean[row * classes..(row + w) * classes].to_vec())?);
        row += w;
    }
    Ok(LambdaSolution {
        lambda,
        batches,
        ridge: cfg.ridge,
        ridge_bumped: bumped,
        max_batch_residual: max_res,
        evaluations: Vec::new(),
    })
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    round2(100.0 * pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

/// Scores `inputs` with λ*, the full network and `draws` random λ of matching norms.
pub fn evaluate_lambda(
    net: &Network,
    lambda: &[Tensor],
    inputs: &Tensor,
    labels: &[usize],
    name: &str,
    draws: usize,
    seed: u64,
) -> Result<LambdaEval> {
    let a = lambda.len();
    let acts = net.forward_collect(inputs, false)?;
    let head: Vec<&Tensor> = (1..=a).map(|i| acts.layer(i)).collect();
    let scores = lincomb_predict(&head, lambda)?;
    let out = acts.output();
    let pred = predicted_classes(&scores);
    let net_pred = predicted_classes(out);
    let agree = pred.iter().zip(&net_pred).filter(|(p, q)| p == q).count() as f64 / labels.len() as f64;
    let max_abs_error = scores.data().iter().zip(out.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    let mut r = rng::seeded(rng::derive(seed, rng::stream::LAMBDA));
    let mut rand_total = 0.0;
    for _ in 0..draws {
        let random: Vec<Tensor> = lambda
            .iter()
            .map(|l| {
                let g: Vec<f64> = (0..l.numel()).map(|_| StandardNormal.sample(&mut r)).collect();
                let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                let scale = l.norm_l2() / gn;
                Tensor::from_parts(l.shape().to_vec(), g.into_iter().map(|v| v * scale).collect())
            })
            .collect();
        rand_total += accuracy(&predicted_classes(&lincomb_predict(&head, &random)?), labels);
    }
    Ok(LambdaEval {
        inputs: name.to_string(),
        acc_network: accuracy(&net_pred, labels),
        acc_tilde: accuracy(&pred, labels),
        acc_rand: if draws == 0 { 0.0 } else { round2(rand_total / draws as f64) },
        argmax_agreement: agree,
        max_abs_error,
    })
}

/// PGD-attacked copy of `data` against `net`.
pub fn attacked_inputs(net: &Network, data: &Dataset, loss: &LossSpec, attack: &AttackConfig, seed: u64) -> Result<Tensor> {
    let mut r = rng::seeded(rng::derive(seed, rng::stream::ATTACK));
    crate::attacks::adversarial_features(net, loss, data, AttackKind::Pgd, attack, crate::training::EVAL_BATCH, &mut r)
}

/// A network whose output is an exact linear combination of its head
/// activations. Head layer `i` emits `new_widths[i−1]` fresh ReLU units
/// followed by a copy of `h_{i−1}` (exact because ReLU outputs are
/// non-negative), so `h_a` stacks every head layer's fresh units. The tail is
/// `tail_layers` bias-free identity-activation maps.
pub struct PlantedNetwork {
    pub net: Network,
    pub a: usize,
    /// Planted λ blocks, one per head layer, acting on that layer's full activation.
    pub lambda: Vec<Tensor>,
}

pub fn planted_lambda_network(input_dim: usize, new_widths: &[usize], tail_layers: usize, classes: usize, seed: u64) -> Result<PlantedNetwork> {
    if new_widths.is_empty() || tail_layers == 0 {
        return Err(Error::Config("planted network needs a head layer and a tail layer".into()));
    }
    let mut r = rng::seeded(rng::derive(seed, rng::stream::INIT));
    let mut gauss = |rows: usize, cols: usize, scale: f64| -> Tensor {
        let d: Vec<f64> = (0..rows * cols)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut r);
                v * scale
            })
            .collect();
        Tensor::from_parts(vec![rows, cols], d)
    };
    let mut layers = Vec::new();
    let mut prev = input_dim;
    let mut carried = 0;
    for (i, &w) in new_widths.iter().enumerate() {
        let fresh = gauss(prev, w, (2.0 / prev as f64).sqrt());
        let carry = if i == 0 { 0 } else { prev };
        let out = w + carry;
        let mut wdata = vec![0.0; prev * out];
        for rr in 0..prev {
            for c in 0..w {
                wdata[rr * out + c] = fresh.get2(rr, c);
            }
            if carry > 0 {
                wdata[rr * out + w + rr] = 1.0;
            }
        }
        let mut bias = vec![0.0; out];
        for b in bias.iter_mut().take(w) {
            *b = 0.1;
        }
        layers.push(DenseLayer::new(Tensor::matrix(prev, out, wdata)?, Tensor::vector(bias)?, Activation::Relu)?);
        carried = out;
        prev = out;
    }
    let a = new_widths.len();
    let mut product = Tensor::identity(carried);
    for t in 0..tail_layers {
        let out = if t + 1 == tail_layers { classes } else { carried.max(classes) };
        let w = gauss(prev, out, 1.0 / (prev as f64).sqrt());
        product = product.matmul(&w)?;
        layers.push(DenseLayer::new(w, Tensor::zeros(&[out]), Activation::Identity)?);
        prev = out;
    }
    // h_a = [fresh_a, fresh_{a−1}, …, fresh_1]; the rows of `product` for
    // fresh_i become λ_i on the fresh part of h_i, zero on its carried part.
    let mut lambda = Vec::with_capacity(a);
    let mut offset_in_ha = carried;
    let mut width_hi = 0;
    for &w in new_widths.iter() {
        width_hi += w;
        offset_in_ha -= w;
        let mut l = vec![0.0; width_hi * classes];
        for rr in 0..w {
            for c in 0..classes {
                l[rr * classes + c] = product.get2(offset_in_ha + rr, c);
            }
        }
        lambda.push(Tensor::matrix(width_hi, classes, l)?);
    }
    Ok(PlantedNetwork {
        net: Network::from_layers(layers)?,
        a,
        lambda,
    })
}
