//! Semirobustness estimates, the layer-composition consistency checks,
//! the A1/A2 layer-dependency diagnostics and the two performance-difference
//! bounds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::{correlation_attack, pgd, AttackConfig, Perturbation};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::mi::{conditional_mi, MiConfig};
use crate::model::{LayerActivations, Network, SubnetworkSplit};
use crate::probe::{margins, normalized_margin, ProbeHead};
use crate::rng;
use crate::second_order::{hvp, max_eigenvalue, EigenEstimate, PowerIterConfig};
use crate::tensor::Tensor;
use crate::training::{batch_gradients, EVAL_BATCH};

/// γ̂ is an upper bound on γ because the infimum is searched by a first-order attack.
pub const APPROXIMATION: &str = "first-order";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemirobustnessEstimate {
    pub layer: usize,
    pub gamma_hat: f64,
    pub clean_correlation: f64,
    pub probe_id: String,
    pub attack: AttackConfig,
    pub samples: usize,
    pub approximation: String,
    /// Per-sample attacked correlation.
    #[serde(skip)]
    pub correlations: Vec<f64>,
    /// Attack perturbations, one row per sample.
    #[serde(skip)]
    pub deltas: Option<Tensor>,
}

/// `mean_x inf_δ y·(G_j∘F^(1,j))(x+δ)` with normalized margins, via the
/// best-of-trajectory correlation attack.
pub fn estimate_gamma(
    net: &Network,
    j: usize,
    probe: &ProbeHead,
    data: &Dataset,
    attack: &AttackConfig,
    seed: u64,
) -> Result<SemirobustnessEstimate> {
    estimate_gamma_from(net, j, probe, data, attack, seed, None)
}

/// As [`estimate_gamma`], with the attack warm-started from `warm` (one row per sample).
pub fn estimate_gamma_from(
    net: &Network,
    j: usize,
    probe: &ProbeHead,
    data: &Dataset,
    attack: &AttackConfig,
    seed: u64,
    warm: Option<&Tensor>,
) -> Result<SemirobustnessEstimate> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(w) = warm {
        if w.shape() != data.features.shape() {
            return Err(Error::shape("estimate_gamma", "warm start must match the feature matrix"));
        }
    }
    let view = net.view(1, j)?;
    let mut r = rng::seeded(rng::derive(seed, rng::stream::ATTACK));
    let mut correlations = Vec::with_capacity(data.len());
    let mut clean = Vec::with_capacity(data.len());
    let mut deltas = Vec::with_capacity(data.features.numel());
    for idx in data.chunks(EVAL_BATCH) {
        let x = data.features.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let w = warm.map(|w| w.select_rows(&idx));
        let res = correlation_attack(view, probe, &x, &y, attack, w.as_ref(), &mut r)?;
        correlations.extend(res.margins.iter().map(|&m| normalized_margin(m)));
        clean.extend(margins(&probe.scores(&view.forward(&x)?)?, &y)?.into_iter().map(normalized_margin));
        deltas.extend_from_slice(res.perturbation.delta.data());
    }
    let n = data.len() as f64;
    Ok(SemirobustnessEstimate {
        layer: j,
        gamma_hat: correlations.iter().sum::<f64>() / n,
        clean_correlation: clean.iter().sum::<f64>() / n,
        probe_id: probe.id(),
        attack: attack.clone(),
        samples: data.len(),
        approximation: APPROXIMATION.to_string(),
        correlations,
        deltas: Some(Tensor::from_parts(data.features.shape().to_vec(), deltas)),
    })
}

fn attacked_features(data: &Dataset, deltas: &Tensor, attack: &AttackConfig) -> Result<Tensor> {
    Perturbation {
        delta: deltas.clone(),
        kind: crate::attacks::AttackKind::Correlation,
        seed: None,
        iterations: 0,
    }
    .apply(&data.features, attack)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub layer: usize,
    /// Max per-sample |corr via F^(1,j) view − corr via full forward truncated at j|.
    pub composition_max_diff: f64,
    /// Max per-sample |corr under G_{j−1}=G_j∘f^(j) at j−1 − corr under G_j at j|, same δ.
    pub construction_max_diff: f64,
    pub gamma_j: f64,
    /// γ̂ at j−1 after an independent re-attack under G_{j−1}.
    pub gamma_prev_reattacked: f64,
    /// `gamma_prev_reattacked ≤ gamma_j + 1e-9`.
    pub dominance_holds: bool,
}

/// Checks the layer-composition consequences at layer `j ≥ 2`.
pub fn check_theorem1(
    net: &Network,
    j: usize,
    probe: &ProbeHead,
    data: &Dataset,
    attack: &AttackConfig,
    seed: u64,
) -> Result<Theorem1Report> {
    if j < 2 || j > net.depth() {
        return Err(Error::LayerIndex { index: j, layers: net.depth() });
    }
    let est = estimate_gamma(net, j, probe, data, attack, seed)?;
    let deltas = est.deltas.as_ref().expect("estimate keeps deltas");
    let x_adv = attacked_features(data, deltas, attack)?;

    let via_view = normalized(&probe.scores(&net.view(1, j)?.forward(&x_adv)?)?, &data.labels)?;
    let collected = net.forward_collect(&x_adv, true)?;
    let via_full = normalized(&probe.scores(collected.layer(j))?, &data.labels)?;
    let prev_probe = probe.compose_through(net)?;
    let via_prev = normalized(&prev_probe.scores(collected.layer(j - 1))?, &data.labels)?;

    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    let composition_max_diff = max_diff(&via_view, &via_full).max(max_diff(&via_view, &est.correlations));
    let construction_max_diff = max_diff(&via_prev, &via_view);

    let reattack = estimate_gamma_from(net, j - 1, &prev_probe, data, attack, rng::derive(seed, 1), Some(deltas))?;
    Ok(Theorem1Report {
        layer: j,
        composition_max_diff,
        construction_max_diff,
        gamma_j: est.gamma_hat,
        gamma_prev_reattacked: reattack.gamma_hat,
        dominance_holds: reattack.gamma_hat <= est.gamma_hat + 1e-9,
    })
}

fn normalized(scores: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    Ok(margins(scores, labels)?.into_iter().map(normalized_margin).collect())
}

/// Per-layer activations on PGD-attacked inputs (clean when `attack` is `None`).
pub fn attacked_activations(
    net: &Network,
    data: &Dataset,
    loss: &LossSpec,
    attack: Option<&AttackConfig>,
    seed: u64,
) -> Result<LayerActivations> {
    let Some(cfg) = attack else {
        return net.forward_collect(&data.features, false);
    };
    let mut r = rng::seeded(rng::derive(seed, rng::stream::ATTACK));
    let mut rows = Vec::with_capacity(data.features.numel());
    for idx in data.chunks(EVAL_BATCH) {
        let x = data.features.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let p = pgd(net, loss, &x, &y, cfg, None, &mut r)?;
        rows.extend_from_slice(p.apply(&x, cfg)?.data());
    }
    net.forward_collect(&Tensor::from_parts(data.features.shape().to_vec(), rows), true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDependency {
    pub layer: usize,
    /// Clamped `Σ_y π(y)·I(h_{j−1}; h_j | y)`, nats.
    pub rho_hat: f64,
    pub raw_rho: f64,
    /// Prior-weighted `Û_j`.
    pub u_hat: f64,
    pub skipped_classes: Vec<usize>,
}

/// Class-conditional MI between consecutive layers `j−1, j` for `j = a+1..=n`.
pub fn layer_dependencies(acts: &LayerActivations, labels: &[usize], split: &SubnetworkSplit, mi: &MiConfig) -> Result<Vec<LayerDependency>> {
    split
        .tail_layers()
        .map(|j| {
            let cfg = MiConfig {
                seed: rng::derive(mi.seed, j as u64),
                ..mi.clone()
            };
            let c = conditional_mi(acts.layer(j - 1), acts.layer(j), labels, &cfg)?;
            Ok(LayerDependency {
                layer: j,
                rho_hat: c.total,
                raw_rho: c.raw_total,
                u_hat: c.ratio_expectation,
                skipped_classes: c.skipped,
            })
        })
        .collect()
}

/// A1: `ρ̂_j` on attacked activations for every tail layer.
pub fn a1_diagnostic(
    net: &Network,
    split: &SubnetworkSplit,
    data: &Dataset,
    loss: &LossSpec,
    attack: &AttackConfig,
    mi: &MiConfig,
    seed: u64,
) -> Result<Vec<LayerDependency>> {
    let acts = attacked_activations(net, data, loss, Some(attack), seed)?;
    layer_dependencies(&acts, &data.labels, split, mi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostic {
    pub layer: usize,
    pub rho_hat: f64,
    pub raw_rho: f64,
    pub u_hat: f64,
    /// `E[y·G_j(h_j)] − E[y·G_{j−1}(h_{j−1})]` under normalized margins.
    pub corr_gap: f64,
    /// `corr_gap ≥ 1 + u_hat`.
    pub a2_satisfied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionDiagnostics {
    pub layers: Vec<LayerDiagnostic>,
    /// Set when every `Û ≥ 1`: with gaps bounded by 2 the second A2 condition
    /// then needs `gap ≥ 2`, which normalized margins cannot reach.
    pub a2_unreachable_regime: bool,
}

impl AssumptionDiagnostics {
    pub fn to_json(&self) -> Result<String> {
        let keyed: BTreeMap<String, &LayerDiagnostic> = self.layers.iter().map(|l| (l.layer.to_string(), l)).collect();
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "layers": keyed,
            "a2_unreachable_regime": self.a2_unreachable_regime,
        }))?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,rho_hat,raw_rho,U_hat,corr_gap,a2_satisfied\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6},{}", l.layer, l.rho_hat, l.raw_rho, l.u_hat, l.corr_gap, l.a2_satisfied);
        }
        s
    }
}

/// A2 diagnostics; `probes` must hold a probe for every layer `a..=n`.
#[allow(clippy::too_many_arguments)]
pub fn a2_diagnostic(
    net: &Network,
    split: &SubnetworkSplit,
    probes: &[ProbeHead],
    data: &Dataset,
    loss: &LossSpec,
    attack: &AttackConfig,
    mi: &MiConfig,
    seed: u64,
) -> Result<AssumptionDiagnostics> {
    let acts = attacked_activations(net, data, loss, Some(attack), seed)?;
    let deps = layer_dependencies(&acts, &data.labels, split, mi)?;
    let probe_at = |j: usize| -> Result<&ProbeHead> {
        let p = probes
            .iter()
            .find(|p| p.layer == j)
            .ok_or(Error::UntrainedProbe(j))?;
        if p.trained {
            Ok(p)
        } else {
            Err(Error::UntrainedProbe(j))
        }
    };
    let mut layers = Vec::with_capacity(deps.len());
    for d in deps {
        let j = d.layer;
        let cur = normalized(&probe_at(j)?.scores(acts.layer(j))?, &data.labels)?;
        let prev = normalized(&probe_at(j - 1)?.scores(acts.layer(j - 1))?, &data.labels)?;
        let corr_gap = cur.iter().zip(&prev).map(|(c, p)| c - p).sum::<f64>() / cur.len() as f64;
        layers.push(LayerDiagnostic {
            layer: j,
            rho_hat: d.rho_hat,
            raw_rho: d.raw_rho,
            u_hat: d.u_hat,
            corr_gap,
            a2_satisfied: corr_gap >= 1.0 + d.u_hat,
        });
    }
    let a2_unreachable_regime = layers.iter().all(|l| l.u_hat >= 1.0);
    Ok(AssumptionDiagnostics { layers, a2_unreachable_regime })
}

/// `mean L(F*(x), y) − L(F̃(x), y)`; both nets must share the head `1..=a`.
pub fn performance_diff(net_star: &Network, net_tilde: &Network, a: usize, data: &Dataset, loss: &LossSpec) -> Result<f64> {
    net_star.ensure_same_head(net_tilde, a)?;
    Ok(mean_loss(net_star, data, loss)? - mean_loss(net_tilde, data, loss)?)
}

pub fn mean_loss(net: &Network, data: &Dataset, loss: &LossSpec) -> Result<f64> {
    loss.mean(&net.forward(&data.features)?, &data.labels)
}

fn tail_delta(net_star: &Network, net_tilde: &Network, a: usize) -> Result<Vec<f64>> {
    net_star.ensure_same_head(net_tilde, a)?;
    let range = a + 1..=net_star.depth();
    let s = net_star.flat_params(range.clone())?;
    let t = net_tilde.flat_params(range)?;
    Ok(t.iter().zip(&s).map(|(u, v)| u - v).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianBound {
    pub lambda_max: EigenEstimate,
    /// `‖ω̃_b − ω_b*‖²`
    pub delta_norm_sq: f64,
    /// `½·λ̂max·‖ω̃_b − ω_b*‖²`
    pub bound: f64,
    /// `‖∇_b ℓ(ω*)‖₂ / √P`
    pub grad_norm: f64,
    pub stationary: bool,
    pub warnings: Vec<String>,
}

/// Gradient of the mean loss w.r.t. the flattened tail parameters.
pub fn tail_gradient(net: &Network, a: usize, data: &Dataset, loss: &LossSpec) -> Result<Vec<f64>> {
    let (_, grads) = batch_gradients(net, loss, &data.features, &data.labels)?;
    Ok(grads[a..]
        .iter()
        .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied().collect::<Vec<_>>())
        .collect())
}

/// Largest-magnitude eigenvalue of the tail-parameter Hessian at `net`.
pub fn tail_hessian_max_eigenvalue(
    net: &Network,
    a: usize,
    data: &Dataset,
    loss: &LossSpec,
    power: PowerIterConfig,
    seed: u64,
) -> Result<EigenEstimate> {
    let range = a + 1..=net.depth();
    let params = net.flat_params(range.clone())?;
    let mut probe_net = net.clone();
    let mut grad = |w: &[f64]| -> Result<Vec<f64>> {
        probe_net.set_flat_params(range.clone(), w)?;
        tail_gradient(&probe_net, a, data, loss)
    };
    let mut r = rng::seeded(rng::derive(seed, rng::stream::BOUNDS));
    max_eigenvalue(|v: &[f64]| hvp(&mut grad, &params, v), params.len(), power, &mut r)
}

/// `½·λ̂max·‖ω̃_b − ω_b*‖²`, with a warning when `ω*` is not near-stationary.
#[allow(clippy::too_many_arguments)]
pub fn hessian_bound(
    net_star: &Network,
    net_tilde: &Network,
    a: usize,
    data: &Dataset,
    loss: &LossSpec,
    power: PowerIterConfig,
    stationarity_tol: f64,
    seed: u64,
) -> Result<HessianBound> {
    let delta = tail_delta(net_star, net_tilde, a)?;
    let delta_norm_sq: f64 = delta.iter().map(|d| d * d).sum();
    let g = tail_gradient(net_star, a, data, loss)?;
    let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt() / (g.len() as f64).sqrt();
    let lambda_max = tail_hessian_max_eigenvalue(net_star, a, data, loss, power, seed)?;
    let mut warnings = Vec::new();
    let stationary = grad_norm <= stationarity_tol;
    if !stationary {
        warnings.push(format!(
            "normalized tail gradient {grad_norm:.3e} exceeds {stationarity_tol:.1e}; the first-order term is not negligible"
        ));
    }
    if !lambda_max.converged {
        warnings.push(format!("power iteration did not converge in {} iterations", lambda_max.iterations));
    }
    Ok(HessianBound {
        bound: 0.5 * lambda_max.value * delta_norm_sq,
        lambda_max,
        delta_norm_sq,
        grad_norm,
        stationary,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBound {
    /// Max sample L2 norm.
    pub c_x: f64,
    /// Product of the activation Lipschitz constants.
    pub c_sigma: f64,
    /// `∏_{j≤a} ‖W_j*‖_F`
    pub head_frobenius_product: f64,
    /// `‖ω̃_b − ω_b*‖_F`
    pub delta_frobenius: f64,
    pub bound: f64,
}

/// `C_x·C_σ·∏_{j≤a}‖W_j*‖_F·‖ω̃_b − ω_b*‖_F`.
pub fn lipschitz_bound(net_star: &Network, net_tilde: &Network, a: usize, data: &Dataset) -> Result<LipschitzBound> {
    let delta = tail_delta(net_star, net_tilde, a)?;
    let delta_frobenius = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    let c_x = data.max_norm();
    let c_sigma: f64 = net_star.layers().iter().map(|l| l.activation.lipschitz()).product();
    let head_frobenius_product: f64 = net_star.layers()[..a].iter().map(|l| l.weights.norm_l2()).product();
    Ok(LipschitzBound {
        c_x,
        c_sigma,
        head_frobenius_product,
        delta_frobenius,
        bound: c_x * c_sigma * head_frobenius_product * delta_frobenius,
    })
}

/// Per-sample `‖F̃(x) − F*(x)‖₂`.
pub fn output_deviations(net_star: &Network, net_tilde: &Network, data: &Dataset) -> Result<Vec<f64>> {
    let a = net_star.forward(&data.features)?;
    let b = net_tilde.forward(&data.features)?;
    let diff = b.zip_map(&a, |u, v| u - v)?;
    Ok((0..diff.rows())
        .map(|i| diff.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Copy of `net` whose tail parameters move by a uniformly random direction of L2 length `norm`.
pub fn perturb_tail<R: Rng + ?Sized>(net: &Network, a: usize, norm: f64, rng: &mut R) -> Result<Network> {
    let range = a + 1..=net.depth();
    let p = net.flat_params(range.clone())?;
    let dir: Vec<f64> = (0..p.len()).map(|_| StandardNormal.sample(rng)).collect();
    let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let moved: Vec<f64> = p.iter().zip(&dir).map(|(w, d)| w + norm * d / len).collect();
    let mut out = net.clone();
    out.set_flat_params(range, &moved)?;
    Ok(out)
}
