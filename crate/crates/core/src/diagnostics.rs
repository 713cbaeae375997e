//! Runtime measurements of the convergence analysis: gradient dissimilarity
//! at a shared point, its sparsity-scaled bound, a Moreau-envelope gradient
//! proxy and empirical estimates of the analysis constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federated::{prox_sgd_step, LocalObjective};
use crate::model::ModelParams;
use crate::numerics::{l2_norm, squared_distance};

/// Client drift at one shared parameter point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub round: usize,
    /// `Δ(w) = Σ_k p_k ‖g_k − ḡ‖²`.
    pub delta: f64,
    pub client_grad_norms: Vec<f64>,
    /// `max_k ‖g_k‖`.
    pub g_hat: f64,
    /// `4·G_hat²`.
    pub bound_general: f64,
    /// `‖ḡ‖`.
    pub mean_grad_norm: f64,
    /// Aggregate firing rate on the evaluation samples; `None` for ANNs.
    pub mean_rate: Option<f64>,
    pub bound_holds: bool,
    /// `‖ḡ‖² ≤ Σ_k p_k ‖g_k‖²`.
    pub jensen_holds: bool,
}

/// Builds a drift report from per-client gradients taken at one point.
pub fn drift_from_gradients(
    round: usize,
    weights: &[f64],
    grads: &[Vec<f64>],
    mean_rate: Option<f64>,
) -> Result<DriftReport> {
    if grads.is_empty() || grads.len() != weights.len() {
        return Err(Error::Argument(format!(
            "{} gradients for {} client weights",
            grads.len(),
            weights.len()
        )));
    }
    let dim = grads[0].len();
    if grads.iter().any(|g| g.len() != dim) {
        return Err(Error::dim("client gradients differ in length"));
    }
    let mut mean = vec![0.0; dim];
    for (g, &p) in grads.iter().zip(weights) {
        mean.iter_mut().zip(g).for_each(|(m, v)| *m += p * v);
    }
    let delta: f64 = grads
        .iter()
        .zip(weights)
        .map(|(g, &p)| p * squared_distance(g, &mean))
        .sum();
    let norms: Vec<f64> = grads.iter().map(|g| l2_norm(g)).collect();
    let g_hat = norms.iter().cloned().fold(0.0, f64::max);
    let bound_general = 4.0 * g_hat * g_hat;
    let mean_norm = l2_norm(&mean);
    let weighted_sq: f64 = norms.iter().zip(weights).map(|(n, p)| p * n * n).sum();
    Ok(DriftReport {
        round,
        delta,
        client_grad_norms: norms,
        g_hat,
        bound_general,
        mean_grad_norm: mean_norm,
        mean_rate,
        bound_holds: delta <= bound_general,
        jensen_holds: mean_norm * mean_norm <= weighted_sq * (1.0 + 1e-12),
    })
}

/// Full-data client gradients at the shared point `w`, then
/// [`drift_from_gradients`]. The proximal term is not part of `F̃_k`.
pub fn drift_metric(
    round: usize,
    w: &ModelParams,
    objectives: &[&dyn LocalObjective],
    weights: &[f64],
    mean_rate: Option<f64>,
) -> Result<DriftReport> {
    let grads = client_gradients(w, objectives)?;
    drift_from_gradients(round, weights, &grads, mean_rate)
}

pub fn client_gradients(w: &ModelParams, objectives: &[&dyn LocalObjective]) -> Result<Vec<Vec<f64>>> {
    objectives
        .iter()
        .map(|o| o.full_loss_grad(&w.values).map(|(_, g)| g))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityBound {
    /// `4·C_hat²·ρ`.
    pub bound: f64,
    pub holds: bool,
    /// Set when the network is silent (`ρ = 0`) yet gradients are nonzero;
    /// the readout and surrogate keep gradients alive without spikes.
    pub silent_with_gradient: bool,
}

pub fn drift_sparsity_bound(drift: &DriftReport, c_hat: f64, rho: f64) -> Result<SparsityBound> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Argument(format!("firing rate {rho} outside [0, 1]")));
    }
    if !(c_hat >= 0.0 && c_hat.is_finite()) {
        return Err(Error::Argument(format!("C_hat must be finite and non-negative, got {c_hat}")));
    }
    let bound = 4.0 * c_hat * c_hat * rho;
    Ok(SparsityBound {
        bound,
        holds: drift.delta <= bound,
        silent_with_gradient: rho == 0.0 && drift.g_hat > 0.0,
    })
}

/// `max ‖g_k‖/√ρ` over the given reports; reports without a positive rate
/// are skipped.
pub fn calibrate_c_hat(reports: &[DriftReport]) -> Option<f64> {
    reports
        .iter()
        .filter_map(|r| match r.mean_rate {
            Some(rho) if rho > 0.0 => Some(r.g_hat / rho.sqrt()),
            _ => None,
        })
        .reduce(f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub round: usize,
    pub delta: f64,
    pub rho: f64,
    pub bound: f64,
    pub in_window: bool,
    pub holds: bool,
    pub silent_with_gradient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityAnalysis {
    pub c_hat: f64,
    /// Number of leading reports used to calibrate `C_hat`.
    pub window: usize,
    pub rows: Vec<SparsityRow>,
    pub out_of_window_violations: usize,
    pub out_of_window_rate: f64,
}

/// Calibrates `C_hat` on the first `⌈window_fraction·n⌉` reports and checks
/// `Δ ≤ 4·C_hat²·ρ` on all of them. Returns `None` for ANN runs or when the
/// window holds no spiking report.
pub fn sparsity_analysis(reports: &[DriftReport], window_fraction: f64) -> Result<Option<SparsityAnalysis>> {
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return Err(Error::Argument("window fraction must lie in (0, 1]".into()));
    }
    if reports.iter().any(|r| r.mean_rate.is_none()) {
        return Ok(None);
    }
    let window = ((reports.len() as f64 * window_fraction).ceil() as usize).min(reports.len());
    let Some(c_hat) = calibrate_c_hat(&reports[..window]) else {
        return Ok(None);
    };
    let mut rows = Vec::with_capacity(reports.len());
    for (i, r) in reports.iter().enumerate() {
        let rho = r.mean_rate.unwrap_or(0.0);
        let b = drift_sparsity_bound(r, c_hat, rho)?;
        rows.push(SparsityRow {
            round: r.round,
            delta: r.delta,
            rho,
            bound: b.bound,
            in_window: i < window,
            holds: b.holds,
            silent_with_gradient: b.silent_with_gradient,
        });
    }
    let outside = rows.len() - window;
    let violations = rows.iter().filter(|r| !r.in_window && !r.holds).count();
    Ok(Some(SparsityAnalysis {
        c_hat,
        window,
        rows,
        out_of_window_violations: violations,
        out_of_window_rate: if outside == 0 { 0.0 } else { violations as f64 / outside as f64 },
    }))
}

/// Inner solver for the per-client proximal problems
/// `ŵ_k = argmin_v F̃_k(v) + (μ/2)‖v − w‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvelopeConfig {
    pub prox_steps: usize,
    /// Initial step as a fraction of the training learning rate.
    pub step_fraction: f64,
    /// Step at iteration `t` is `step0 / (1 + decay·t)`.
    pub decay: f64,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        Self {
            prox_steps: 50,
            step_fraction: 0.2,
            decay: 0.02,
        }
    }
}

impl EnvelopeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prox_steps == 0 {
            return Err(Error::config("diagnostics.envelope.prox_steps", "must be at least 1"));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction.is_finite()) {
            return Err(Error::config("diagnostics.envelope.step_fraction", "must be positive"));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::config("diagnostics.envelope.decay", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeReport {
    pub round: usize,
    /// Approximate proximal points `ŵ_k`, one per client.
    #[serde(skip)]
    pub prox_solutions: Vec<ModelParams>,
    /// `‖μ·Σ_k p_k (w − ŵ_k)‖`.
    pub proxy_norm: f64,
}

/// Envelope-gradient proxy `μ·Σ_k p_k (w − ŵ_k(w))`, with each `ŵ_k` found
/// by deterministic full-objective proximal gradient steps started at `w`.
pub fn envelope_grad_proxy(
    round: usize,
    w: &ModelParams,
    objectives: &[&dyn LocalObjective],
    weights: &[f64],
    mu: f64,
    learning_rate: f64,
    cfg: &EnvelopeConfig,
) -> Result<EnvelopeReport> {
    cfg.validate()?;
    if objectives.len() != weights.len() {
        return Err(Error::Argument("one weight per client objective is required".into()));
    }
    let step0 = learning_rate * cfg.step_fraction;
    let mut solutions = Vec::with_capacity(objectives.len());
    let mut grad = vec![0.0; w.values.len()];
    for (obj, &p) in objectives.iter().zip(weights) {
        let mut v = w.clone();
        if mu > 0.0 {
            for t in 0..cfg.prox_steps {
                let (_, g) = obj.full_loss_grad(&v.values)?;
                let step = step0 / (1.0 + cfg.decay * t as f64);
                prox_sgd_step(&mut v.values, &w.values, &g, step, mu);
            }
        }
        for ((acc, &wi), &vi) in grad.iter_mut().zip(&w.values).zip(&v.values) {
            *acc += p * (wi - vi);
        }
        solutions.push(v);
    }
    Ok(EnvelopeReport {
        round,
        prox_solutions: solutions,
        proxy_norm: mu * l2_norm(&grad),
    })
}

/// Gradients recorded at one global iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSnapshot {
    pub params: Vec<f64>,
    /// Full-data gradient of the global objective at `params`.
    pub full_grad: Vec<f64>,
    /// Mini-batch gradients at `params`, each paired with the full-data
    /// gradient of the same objective.
    pub stochastic: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    /// Surrogate derivative bound `η/2`.
    pub c_phi: Option<f64>,
    pub g_hat: Option<f64>,
    pub c_hat: Option<f64>,
    /// Mean of `‖g(ξ) − g‖²` over recorded mini-batch gradients.
    pub sigma2_hat: Option<f64>,
    /// Largest `‖∇F̃(w) − ∇F̃(w')‖/‖w − w'‖` over consecutive snapshots.
    pub l_hat: Option<f64>,
}

impl ConstantEstimates {
    pub fn is_empty(&self) -> bool {
        self == &Self::default()
    }
}

pub fn estimate_constants(
    snapshots: &[GradientSnapshot],
    drift: &[DriftReport],
    surrogate_eta: Option<f64>,
) -> ConstantEstimates {
    let g_hat = drift.iter().map(|r| r.g_hat).reduce(f64::max);
    let c_hat = calibrate_c_hat(drift);
    let pairs: Vec<&(Vec<f64>, Vec<f64>)> = snapshots.iter().flat_map(|s| &s.stochastic).collect();
    let sigma2_hat = if pairs.is_empty() {
        None
    } else {
        Some(pairs.iter().map(|(g, full)| squared_distance(g, full)).sum::<f64>() / pairs.len() as f64)
    };
    let l_hat = snapshots
        .windows(2)
        .filter_map(|w| {
            let dw = squared_distance(&w[0].params, &w[1].params).sqrt();
            (dw > 0.0).then(|| squared_distance(&w[0].full_grad, &w[1].full_grad).sqrt() / dw)
        })
        .reduce(f64::max);
    ConstantEstimates {
        c_phi: surrogate_eta.map(|eta| eta / 2.0),
        g_hat,
        c_hat,
        sigma2_hat,
        l_hat,
    }
}
