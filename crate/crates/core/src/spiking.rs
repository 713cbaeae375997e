//! Leaky integrate-and-fire dynamics and surrogate-gradient BPTT.
//!
//! Forward dynamics per neuron, for steps `t = 0..T`:
//!
//! ```text
//! P(t)   = (1 − λ)·U(t−1) + λ·X(t)        pre-reset potential, U(−1) = 0
//! S(t)   = [P(t) ≥ U_th]                  binary spike
//! U(t)   = P(t)·(1 − S(t))                hard reset to zero
//! ```
//!
//! where `X(t)` is the synaptic drive `W·I(t) + b`. The backward pass replaces
//! `∂S/∂P` with the arctan surrogate derivative and treats the reset as a
//! gate on the temporal path only:
//!
//! ```text
//! ∂L/∂P(t) = ∂L/∂S(t)·φ'(P(t) − U_th) + ∂L/∂P(t+1)·(1 − λ)·(1 − S(t))
//! ∂L/∂X(t) = λ·∂L/∂P(t)
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    conv1d_backward_accum, conv1d_forward_into, dense_backward_accum, dense_forward_into,
    ConvGeom, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifConfig {
    /// Leak coefficient λ in (0, 1].
    pub leak: f64,
    /// Firing threshold U_th.
    pub threshold: f64,
    /// Surrogate smoothing η.
    pub surrogate_eta: f64,
    /// Number of simulation steps T.
    pub time_steps: usize,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            leak: 0.5,
            threshold: 1.0,
            surrogate_eta: 2.0,
            time_steps: 6,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            return Err(Error::config("lif.leak", format!("must lie in (0, 1], got {}", self.leak)));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::config("lif.threshold", "must be positive and finite"));
        }
        if !(self.surrogate_eta > 0.0 && self.surrogate_eta.is_finite()) {
            return Err(Error::config("lif.surrogate_eta", "must be positive and finite"));
        }
        if self.time_steps == 0 {
            return Err(Error::config("lif.time_steps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn surrogate(&self) -> Surrogate {
        Surrogate {
            eta: self.surrogate_eta,
        }
    }
}

/// `φ(s) = arctan(πηs/2)/π + 1/2`.
pub fn surrogate_value(s: f64, eta: f64) -> f64 {
    (PI * eta * s / 2.0).atan() / PI + 0.5
}

/// `φ'(s) = (η/2) / (1 + (πηs/2)²)`, bounded by `η/2`.
pub fn surrogate_deriv(s: f64, eta: f64) -> f64 {
    let z = PI * eta * s / 2.0;
    (eta / 2.0) / (1.0 + z * z)
}

/// Arctan surrogate with a fixed smoothing parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surrogate {
    pub eta: f64,
}

impl Surrogate {
    pub fn value(&self, s: f64) -> f64 {
        surrogate_value(s, self.eta)
    }

    pub fn deriv(&self, s: f64) -> f64 {
        surrogate_deriv(s, self.eta)
    }

    /// Supremum of `|φ'|`, attained at 0.
    pub fn max_deriv(&self) -> f64 {
        self.eta / 2.0
    }
}

/// One update of a population of LIF neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct LifStep {
    pub pre_reset: Vec<f64>,
    pub spikes: Vec<f64>,
    pub post_reset: Vec<f64>,
}

pub fn lif_step(u_prev: &[f64], weighted_input: &[f64], cfg: &LifConfig) -> Result<LifStep> {
    if u_prev.len() != weighted_input.len() {
        return Err(Error::dim(format!(
            "lif_step: {} potentials vs {} inputs",
            u_prev.len(),
            weighted_input.len()
        )));
    }
    let n = u_prev.len();
    let mut step = LifStep {
        pre_reset: vec![0.0; n],
        spikes: vec![0.0; n],
        post_reset: u_prev.to_vec(),
    };
    lif_step_into(
        &mut step.post_reset,
        weighted_input,
        cfg,
        &mut step.pre_reset,
        &mut step.spikes,
    );
    Ok(step)
}

/// Advances `potential` in place; writes the pre-reset potential and spikes.
#[inline]
pub(crate) fn lif_step_into(
    potential: &mut [f64],
    drive: &[f64],
    cfg: &LifConfig,
    pre_reset: &mut [f64],
    spikes: &mut [f64],
) {
    let keep = 1.0 - cfg.leak;
    for j in 0..potential.len() {
        let p = keep * potential[j] + cfg.leak * drive[j];
        pre_reset[j] = p;
        if p >= cfg.threshold {
            spikes[j] = 1.0;
            potential[j] = 0.0;
        } else {
            spikes[j] = 0.0;
            potential[j] = p;
        }
    }
}

/// Membrane trace of one layer over all time steps, stored `[T×N]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    pub time_steps: usize,
    pub neurons: usize,
    /// Potential after reset, i.e. the value carried into the next step.
    pub potentials: Vec<f64>,
    pub pre_reset: Vec<f64>,
    pub spikes: Vec<f64>,
}

impl LifState {
    pub fn new(time_steps: usize, neurons: usize) -> Self {
        let n = time_steps * neurons;
        Self {
            time_steps,
            neurons,
            potentials: vec![0.0; n],
            pre_reset: vec![0.0; n],
            spikes: vec![0.0; n],
        }
    }

    pub fn spike_count(&self) -> f64 {
        self.spikes.iter().sum()
    }

    pub fn spikes_tensor(&self) -> Tensor {
        Tensor::new(vec![self.time_steps, self.neurons], self.spikes.clone())
            .expect("state extents are positive")
    }
}

/// Fraction of (step, neuron) slots that carry a spike.
pub fn measure_firing_rate(state: &LifState) -> f64 {
    state.spike_count() / (state.time_steps * state.neurons) as f64
}

/// Synaptic transform feeding a layer: dense or valid 1-D convolution, both
/// with a bias (one per output channel for convolutions).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Synapse {
    Dense { inputs: usize, outputs: usize },
    Conv(ConvGeom),
}

impl Synapse {
    pub fn in_size(&self) -> usize {
        match self {
            Synapse::Dense { inputs, .. } => *inputs,
            Synapse::Conv(g) => g.in_channels * g.in_len,
        }
    }

    pub fn out_size(&self) -> usize {
        match self {
            Synapse::Dense { outputs, .. } => *outputs,
            Synapse::Conv(g) => g.out_channels * g.out_len,
        }
    }

    pub fn weight_len(&self) -> usize {
        match self {
            Synapse::Dense { inputs, outputs } => inputs * outputs,
            Synapse::Conv(g) => g.kernel_len(),
        }
    }

    pub fn bias_len(&self) -> usize {
        match self {
            Synapse::Dense { outputs, .. } => *outputs,
            Synapse::Conv(g) => g.out_channels,
        }
    }

    /// Multiply-accumulate count of one dense evaluation.
    pub fn macs(&self) -> u64 {
        match self {
            Synapse::Dense { inputs, outputs } => (inputs * outputs) as u64,
            Synapse::Conv(g) => (g.out_channels * g.out_len * g.in_channels * g.kernel) as u64,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self {
            Synapse::Dense { inputs, .. } => *inputs,
            Synapse::Conv(g) => g.in_channels * g.kernel,
        }
    }

    pub fn forward_into(&self, input: &[f64], weights: &[f64], bias: &[f64], out: &mut [f64]) {
        match self {
            Synapse::Dense { .. } => dense_forward_into(input, weights, bias, out),
            Synapse::Conv(g) => {
                conv1d_forward_into(g, input, weights, out);
                for (o, &b) in bias.iter().enumerate() {
                    for y in &mut out[o * g.out_len..(o + 1) * g.out_len] {
                        *y += b;
                    }
                }
            }
        }
    }

    pub fn backward_accum(
        &self,
        input: &[f64],
        weights: &[f64],
        upstream: &[f64],
        grad_input: Option<&mut [f64]>,
        grad_weights: &mut [f64],
        grad_bias: &mut [f64],
    ) {
        match self {
            Synapse::Dense { .. } => {
                dense_backward_accum(input, weights, upstream, grad_input, grad_weights, grad_bias)
            }
            Synapse::Conv(g) => {
                for (o, gb) in grad_bias.iter_mut().enumerate() {
                    *gb += upstream[o * g.out_len..(o + 1) * g.out_len].iter().sum::<f64>();
                }
                conv1d_backward_accum(g, input, weights, upstream, grad_input, grad_weights)
            }
        }
    }
}

/// What a spiking layer saw and did during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LifLayerCache {
    /// Presynaptic activity `[T×N_in]`, or a single `[N_in]` row when the
    /// same analog input drives every step.
    pub inputs: Vec<f64>,
    pub constant_input: bool,
    pub state: LifState,
}

impl LifLayerCache {
    pub fn input_at(&self, t: usize, n_in: usize) -> &[f64] {
        if self.constant_input {
            &self.inputs[..n_in]
        } else {
            &self.inputs[t * n_in..(t + 1) * n_in]
        }
    }
}

/// Runs a spiking layer over `T` steps. `inputs` holds either `T` rows or one
/// row that is replayed at every step (direct encoding).
pub(crate) fn lif_layer_run(
    syn: &Synapse,
    weights: &[f64],
    bias: &[f64],
    inputs: Vec<f64>,
    constant_input: bool,
    cfg: &LifConfig,
) -> LifLayerCache {
    let (n_in, n_out, steps) = (syn.in_size(), syn.out_size(), cfg.time_steps);
    let mut state = LifState::new(steps, n_out);
    let mut drive = vec![0.0; n_out];
    let mut potential = vec![0.0; n_out];
    if constant_input {
        syn.forward_into(&inputs[..n_in], weights, bias, &mut drive);
    }
    for t in 0..steps {
        if !constant_input {
            syn.forward_into(&inputs[t * n_in..(t + 1) * n_in], weights, bias, &mut drive);
        }
        let row = t * n_out..(t + 1) * n_out;
        lif_step_into(
            &mut potential,
            &drive,
            cfg,
            &mut state.pre_reset[row.clone()],
            &mut state.spikes[row.clone()],
        );
        state.potentials[row].copy_from_slice(&potential);
    }
    LifLayerCache {
        inputs,
        constant_input,
        state,
    }
}

/// Forward pass of one spiking layer over `inputs [T×N_in]`.
pub fn lif_layer_forward(
    inputs: &Tensor,
    syn: &Synapse,
    weights: &[f64],
    bias: &[f64],
    cfg: &LifConfig,
) -> Result<(Tensor, LifLayerCache)> {
    cfg.validate()?;
    check_synapse_params(syn, weights, bias)?;
    if inputs.shape() != [cfg.time_steps, syn.in_size()] {
        return Err(Error::dim(format!(
            "layer input {:?}, expected [{}, {}]",
            inputs.shape(),
            cfg.time_steps,
            syn.in_size()
        )));
    }
    let cache = lif_layer_run(syn, weights, bias, inputs.data().to_vec(), false, cfg);
    Ok((cache.state.spikes_tensor(), cache))
}

fn check_synapse_params(syn: &Synapse, weights: &[f64], bias: &[f64]) -> Result<()> {
    if weights.len() != syn.weight_len() || bias.len() != syn.bias_len() {
        return Err(Error::dim(format!(
            "synapse needs {} weights and {} biases, got {} and {}",
            syn.weight_len(),
            syn.bias_len(),
            weights.len(),
            bias.len()
        )));
    }
    Ok(())
}

/// Gradients produced by [`lif_layer_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LifLayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// `[T×N_in]` gradient with respect to the presynaptic activity.
    pub inputs: Tensor,
}

/// Surrogate-gradient BPTT through one spiking layer.
pub fn lif_layer_backward(
    cache: &LifLayerCache,
    syn: &Synapse,
    weights: &[f64],
    upstream_spike_grads: &Tensor,
    cfg: &LifConfig,
) -> Result<LifLayerGrads> {
    cfg.validate()?;
    let state = &cache.state;
    if state.neurons != syn.out_size() || state.time_steps != cfg.time_steps {
        return Err(Error::dim("cache does not match synapse / config"));
    }
    if upstream_spike_grads.shape() != [state.time_steps, state.neurons] {
        return Err(Error::dim(format!(
            "upstream {:?}, expected [{}, {}]",
            upstream_spike_grads.shape(),
            state.time_steps,
            state.neurons
        )));
    }
    if weights.len() != syn.weight_len() {
        return Err(Error::dim("weight length does not match synapse"));
    }
    let mut gw = vec![0.0; syn.weight_len()];
    let mut gb = vec![0.0; syn.bias_len()];
    let mut gx = vec![0.0; cfg.time_steps * syn.in_size()];
    lif_layer_backward_accum(
        cache,
        syn,
        weights,
        upstream_spike_grads.data(),
        cfg,
        &mut gw,
        &mut gb,
        Some(&mut gx),
    );
    Ok(LifLayerGrads {
        weights: gw,
        bias: gb,
        inputs: Tensor::new(vec![cfg.time_steps, syn.in_size()], gx)?,
    })
}

/// Gradient of the loss with respect to the synaptic drive `X(t)`, `[T×N]`.
pub fn drive_grads(state: &LifState, upstream_spike_grads: &[f64], cfg: &LifConfig) -> Vec<f64> {
    let (steps, n) = (state.time_steps, state.neurons);
    let surrogate = cfg.surrogate();
    let keep = 1.0 - cfg.leak;
    let mut grad_drive = vec![0.0; steps * n];
    // ∂L/∂P(t+1), carried backwards in time.
    let mut carry = vec![0.0; n];
    for t in (0..steps).rev() {
        for j in 0..n {
            let idx = t * n + j;
            let spike_path =
                upstream_spike_grads[idx] * surrogate.deriv(state.pre_reset[idx] - cfg.threshold);
            let temporal = carry[j] * keep * (1.0 - state.spikes[idx]);
            let g = spike_path + temporal;
            carry[j] = g;
            grad_drive[idx] = cfg.leak * g;
        }
    }
    grad_drive
}

/// Accumulating form of [`lif_layer_backward`]; `grad_inputs` has the same
/// row count as `cache.inputs`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn lif_layer_backward_accum(
    cache: &LifLayerCache,
    syn: &Synapse,
    weights: &[f64],
    upstream_spike_grads: &[f64],
    cfg: &LifConfig,
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
    mut grad_inputs: Option<&mut [f64]>,
) {
    let state = &cache.state;
    let (steps, n_in, n_out) = (state.time_steps, syn.in_size(), state.neurons);
    let grad_drive = drive_grads(state, upstream_spike_grads, cfg);
    if cache.constant_input {
        // Linear in the drive, so the per-step backward passes collapse into one.
        let mut total = vec![0.0; n_out];
        for row in grad_drive.chunks_exact(n_out) {
            for (acc, g) in total.iter_mut().zip(row) {
                *acc += g;
            }
        }
        syn.backward_accum(
            &cache.inputs[..n_in],
            weights,
            &total,
            grad_inputs.as_deref_mut().map(|g| &mut g[..n_in]),
            grad_weights,
            grad_bias,
        );
        return;
    }
    for t in 0..steps {
        let gd = &grad_drive[t * n_out..(t + 1) * n_out];
        if gd.iter().all(|&g| g == 0.0) {
            continue;
        }
        syn.backward_accum(
            cache.input_at(t, n_in),
            weights,
            gd,
            grad_inputs
                .as_deref_mut()
                .map(|g| &mut g[t * n_in..(t + 1) * n_in]),
            grad_weights,
            grad_bias,
        );
    }
}
