//! L∞ additive-threat-model attacks: FGSM, PGD and the correlation-minimizing
//! PGD used to approximate the infimum in the semirobustness expectation.
//!
//! All attacks ascend a per-sample objective through the sign of the input
//! gradient and project back onto the ε-ball (and the input range when
//! clamping is on). PGD and the correlation attack keep, per sample, the
//! best iterate seen along the trajectory.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::model::{Network, ParamMode, SubnetworkView};
use crate::probe::{margins, ProbeHead};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    LInf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub norm: Norm,
    pub random_start: bool,
    /// Clamp `x + δ` to `[input_lo, input_hi]`; off for unbounded synthetic data.
    pub clamp_inputs: bool,
    pub input_lo: f64,
    pub input_hi: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            iterations: 10,
            norm: Norm::LInf,
            random_start: true,
            clamp_inputs: true,
            input_lo: 0.0,
            input_hi: 1.0,
        }
    }
}

impl AttackConfig {
    /// `epsilon = 0` is accepted and yields the zero perturbation.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.clamp_inputs && self.input_lo > self.input_hi {
            return Err(Error::Config("input_lo must not exceed input_hi".into()));
        }
        Ok(())
    }

    fn clamp_value(&self, v: f64) -> f64 {
        if self.clamp_inputs {
            v.clamp(self.input_lo, self.input_hi)
        } else {
            v
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Correlation,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Correlation => "correlation",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
    pub kind: AttackKind,
    pub seed: Option<u64>,
    /// Gradient steps taken.
    pub iterations: usize,
}

impl Perturbation {
    /// The adversarial input `clamp(x + δ)`.
    pub fn apply(&self, x: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
        x.zip_map(&self.delta, |a, d| cfg.clamp_value(a + d))
    }
}

/// Anything that maps an input batch to scores on a tape.
pub trait AttackTarget {
    fn scores_tape(&self, tape: &mut Tape, x: Var) -> Result<Var>;
    fn scores(&self, x: &Tensor) -> Result<Tensor>;
}

impl AttackTarget for Network {
    fn scores_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.full().forward_tape(tape, x, ParamMode::Constant)?.output)
    }

    fn scores(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

impl AttackTarget for SubnetworkView<'_> {
    fn scores_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_tape(tape, x, ParamMode::Constant)?.output)
    }

    fn scores(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

/// `G_j ∘ F^(1,j)`: a prefix view followed by its probe.
pub struct Probed<'a> {
    pub view: SubnetworkView<'a>,
    pub probe: &'a ProbeHead,
}

impl AttackTarget for Probed<'_> {
    fn scores_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.view.forward_tape(tape, x, ParamMode::Constant)?.output;
        self.probe.scores_tape(tape, h)
    }

    fn scores(&self, x: &Tensor) -> Result<Tensor> {
        self.probe.scores(&self.view.forward(x)?)
    }
}

/// Per-sample quantity the attack increases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Loss(LossSpec),
    /// Increase `−margin`, i.e. drive the label correlation down.
    NegativeMargin,
}

impl Objective {
    fn tape_value(&self, tape: &mut Tape, scores: Var, labels: &[usize]) -> Result<Var> {
        let n = labels.len() as f64;
        match self {
            // summed so each row's gradient is its own loss gradient
            Objective::Loss(spec) => {
                let mean = spec.tape_loss(tape, scores, labels)?;
                tape.scale(mean, n)
            }
            Objective::NegativeMargin => {
                let m = tape.margin(scores, labels)?;
                let s = tape.sum(m)?;
                tape.scale(s, -1.0)
            }
        }
    }

    fn per_sample(&self, scores: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        match self {
            Objective::Loss(spec) => spec.per_sample(scores, labels),
            Objective::NegativeMargin => Ok(margins(scores, labels)?.into_iter().map(|m| -m).collect()),
        }
    }
}

/// Where the iterate starts and whether the start competes as a candidate.
#[derive(Clone, Debug)]
pub enum Start<'a> {
    Zero { include: bool },
    Random,
    Warm(&'a Tensor),
}

/// Outcome of a projected ascent run.
#[derive(Clone, Debug)]
pub struct AscentRun {
    pub best_delta: Tensor,
    /// Objective value of `best_delta` per sample.
    pub best_value: Vec<f64>,
    /// Iterates after each step when recording was requested.
    pub trajectory: Vec<Tensor>,
    pub iterations: usize,
}

fn input_gradient<T: AttackTarget + ?Sized>(
    target: &T,
    objective: &Objective,
    x_adv: &Tensor,
    labels: &[usize],
) -> Result<(Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.param(x_adv.clone());
    let scores = target.scores_tape(&mut tape, xv)?;
    let values = objective.per_sample(tape.value(scores), labels)?;
    let obj = objective.tape_value(&mut tape, scores, labels)?;
    let g = tape.backward(obj)?;
    Ok((g.get(xv), values))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `δ ← Π(δ + step·sign(g))`: projection onto the ε-ball, then onto the input range.
fn ascent_step(x: &Tensor, delta: &Tensor, grad: &Tensor, step: f64, cfg: &AttackConfig) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(delta.data())
        .zip(grad.data())
        .map(|((&xi, &di), &gi)| project(xi, di + step * sign(gi), cfg))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn project(x: f64, d: f64, cfg: &AttackConfig) -> f64 {
    let d = d.clamp(-cfg.epsilon, cfg.epsilon);
    if cfg.clamp_inputs {
        cfg.clamp_value(x + d) - x
    } else {
        d
    }
}

fn offset(x: &Tensor, delta: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    x.zip_map(delta, |a, d| cfg.clamp_value(a + d))
}

/// Sign-gradient ascent with per-step projection, keeping the per-sample best iterate.
#[allow(clippy::too_many_arguments)]
pub fn projected_ascent<T: AttackTarget + ?Sized, R: Rng + ?Sized>(
    target: &T,
    objective: &Objective,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    start: Start<'_>,
    rng: &mut R,
    record: bool,
) -> Result<AscentRun> {
    cfg.validate()?;
    if labels.len() != x.rows() {
        return Err(Error::shape("attack", "label count differs from rows"));
    }
    let cols = x.cols();
    let (mut delta, include_start) = match start {
        Start::Zero { include } => (Tensor::zeros(x.shape()), include),
        Start::Random => {
            let d: Vec<f64> = x
                .data()
                .iter()
                .map(|&xi| {
                    let u = if cfg.epsilon > 0.0 {
                        rng.random_range(-cfg.epsilon..=cfg.epsilon)
                    } else {
                        0.0
                    };
                    project(xi, u, cfg)
                })
                .collect();
            (Tensor::from_parts(x.shape().to_vec(), d), false)
        }
        Start::Warm(d0) => {
            if d0.shape() != x.shape() {
                return Err(Error::shape("attack warm start", "delta shape differs from input"));
            }
            let d = x.data().iter().zip(d0.data()).map(|(&xi, &di)| project(xi, di, cfg)).collect();
            (Tensor::from_parts(x.shape().to_vec(), d), true)
        }
    };

    let rows = x.rows();
    let mut best_delta = delta.clone();
    let mut best_value = vec![f64::NEG_INFINITY; rows];
    let mut trajectory = Vec::new();

    for it in 0..=cfg.iterations {
        let x_adv = offset(x, &delta, cfg)?;
        let (grad, values) = if it < cfg.iterations {
            let (g, v) = input_gradient(target, objective, &x_adv, labels)?;
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::AttackAborted {
                    completed: it,
                    requested: cfg.iterations,
                });
            }
            (Some(g), v)
        } else {
            (None, objective.per_sample(&target.scores(&x_adv)?, labels)?)
        };
        if it > 0 || include_start {
            for r in 0..rows {
                if values[r] > best_value[r] {
                    best_value[r] = values[r];
                    let dst = &mut best_delta.data_mut()[r * cols..(r + 1) * cols];
                    dst.copy_from_slice(delta.row(r));
                }
            }
        }
        if let Some(g) = grad {
            delta = ascent_step(x, &delta, &g, cfg.step_size, cfg);
            if record {
                trajectory.push(delta.clone());
            }
        }
    }
    Ok(AscentRun {
        best_delta,
        best_value,
        trajectory,
        iterations: cfg.iterations,
    })
}

/// `δ = ε·sign(∇ₓ L)` projected onto the input range; one gradient evaluation.
pub fn fgsm<T: AttackTarget + ?Sized>(
    target: &T,
    loss: &LossSpec,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Perturbation> {
    cfg.validate()?;
    let (g, _) = input_gradient(target, &Objective::Loss(*loss), x, labels)?;
    if g.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fgsm gradient"));
    }
    let delta = ascent_step(x, &Tensor::zeros(x.shape()), &g, cfg.epsilon, cfg);
    Ok(Perturbation {
        delta,
        kind: AttackKind::Fgsm,
        seed: None,
        iterations: 1,
    })
}

/// PGD on the loss; returns the per-sample best of the post-step iterates
/// (plus the warm start when one is given).
pub fn pgd<T: AttackTarget + ?Sized, R: Rng + ?Sized>(
    target: &T,
    loss: &LossSpec,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    warm: Option<&Tensor>,
    rng: &mut R,
) -> Result<Perturbation> {
    let start = match warm {
        Some(d) => Start::Warm(d),
        None if cfg.random_start => Start::Random,
        None => Start::Zero { include: false },
    };
    let run = projected_ascent(target, &Objective::Loss(*loss), x, labels, cfg, start, rng, false)?;
    Ok(Perturbation {
        delta: run.best_delta,
        kind: AttackKind::Pgd,
        seed: None,
        iterations: run.iterations,
    })
}

/// Result of [`correlation_attack`].
#[derive(Clone, Debug)]
pub struct CorrelationAttack {
    pub perturbation: Perturbation,
    /// Raw margin `y·(G_j∘F^(j))(x+δ)` at the returned δ.
    pub margins: Vec<f64>,
}

/// PGD that minimizes the probe margin of `G_j ∘ F^(1,j)`. The unperturbed (or
/// warm-start) point is always a candidate, so the returned margin never
/// exceeds the starting one.
pub fn correlation_attack<R: Rng + ?Sized>(
    view: SubnetworkView<'_>,
    probe: &ProbeHead,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    warm: Option<&Tensor>,
    rng: &mut R,
) -> Result<CorrelationAttack> {
    if view.first() != 1 || view.last() != probe.layer {
        return Err(Error::Config(format!(
            "correlation attack needs the prefix view F^(1,{}), got F^({},{})",
            probe.layer,
            view.first(),
            view.last()
        )));
    }
    if !probe.trained {
        return Err(Error::UntrainedProbe(probe.layer));
    }
    let target = Probed { view, probe };
    let start = match warm {
        Some(d) => Start::Warm(d),
        None if cfg.random_start => Start::Random,
        None => Start::Zero { include: true },
    };
    let mut run = projected_ascent(&target, &Objective::NegativeMargin, x, labels, cfg, start, rng, false)?;
    if warm.is_none() && cfg.random_start {
        // random starts skip δ = 0; add it back as a candidate
        let clean = margins(&target.scores(x)?, labels)?;
        let cols = x.cols();
        for (r, m) in clean.iter().enumerate() {
            if -m > run.best_value[r] {
                run.best_value[r] = -m;
                run.best_delta.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
            }
        }
    }
    Ok(CorrelationAttack {
        perturbation: Perturbation {
            delta: run.best_delta,
            kind: AttackKind::Correlation,
            seed: None,
            iterations: run.iterations,
        },
        margins: run.best_value.into_iter().map(|v| -v).collect(),
    })
}

/// Adversarial copies of a dataset's features, attacked in batches.
pub fn adversarial_features<R: Rng + ?Sized>(
    net: &Network,
    loss: &LossSpec,
    data: &Dataset,
    kind: AttackKind,
    cfg: &AttackConfig,
    batch_size: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let cols = data.dim();
    let mut out = Vec::with_capacity(data.len() * cols);
    for idx in data.chunks(batch_size) {
        let x = data.features.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let p = match kind {
            AttackKind::Fgsm => fgsm(net, loss, &x, &y, cfg)?,
            AttackKind::Pgd => pgd(net, loss, &x, &y, cfg, None, rng)?,
            AttackKind::Correlation => {
                return Err(Error::Config("correlation attack needs a probe".into()))
            }
        };
        out.extend_from_slice(p.apply(&x, cfg)?.data());
    }
    Tensor::matrix(data.len(), cols, out)
}
