//! Synaptic-operation counts and the inference-energy comparison between
//! the spiking and conventional backbones of one architecture.
//!
//! `E_ann = Σ_ℓ MAC_ℓ·e_mac`. `E_snn = Σ_ℓ T·ρ_ℓ^in·MAC_ℓ·e_ac` for
//! spike-driven layers, where `ρ_ℓ^in` is the firing rate of the spike train
//! feeding layer `ℓ`. The first layer receives the analog signal, so by
//! default it costs `T·MAC_1·e_mac`; [`EnergyOptions::first_layer_ac`]
//! prices it as `T·MAC_1·e_ac` instead.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, Backbone, Network};
use crate::spiking::Synapse;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOps {
    pub name: String,
    /// Multiply-accumulates of one dense pass; also the number of synaptic
    /// positions an input spike can reach per time step.
    pub macs: u64,
    /// Neurons `d_ℓ` in the layer's output.
    pub neurons: usize,
}

/// Per-layer operation counts, identical for both backbones of a spec.
pub fn count_ops(spec: &ArchitectureSpec) -> Result<Vec<LayerOps>> {
    let synapses = spec.synapses()?;
    Ok(synapses
        .iter()
        .enumerate()
        .map(|(i, s)| LayerOps {
            name: match s {
                Synapse::Conv(_) => format!("conv{}", i + 1),
                Synapse::Dense { .. } => format!("dense{}", i + 1),
            },
            macs: s.macs(),
            neurons: s.out_size(),
        })
        .collect())
}

/// Energy per operation, in joules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConstants {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        Self {
            e_mac: 4.6e-12,
            e_ac: 0.9e-12,
        }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("energy.e_mac", self.e_mac), ("energy.e_ac", self.e_ac)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyOptions {
    /// Price the analog first layer as accumulates at input rate 1.
    pub first_layer_ac: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub name: String,
    pub macs: u64,
    /// Rate of the incoming spike train; `None` for analog input.
    pub input_rate: Option<f64>,
    pub ann_joules: f64,
    pub snn_joules: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub time_steps: usize,
    pub constants: EnergyConstants,
    pub first_layer_ac: bool,
    /// Output firing rate of each spiking layer.
    pub rates: Vec<f64>,
    pub layers: Vec<LayerEnergy>,
    pub e_ann: f64,
    pub e_snn: f64,
    /// `E_ann / E_snn`; infinite when the SNN performs no operations.
    pub ratio: f64,
}

fn check_rate(r: f64) -> Result<()> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::Argument(format!("firing rate {r} outside [0, 1]")))
    }
}

/// Prices every layer given the rate of its incoming spike train (`None`
/// for an analog input priced at MAC cost each step).
pub fn estimate_energy_per_input(
    ops: &[LayerOps],
    input_rates: &[Option<f64>],
    time_steps: usize,
    constants: &EnergyConstants,
) -> Result<(Vec<LayerEnergy>, f64, f64)> {
    constants.validate()?;
    if time_steps == 0 {
        return Err(Error::Argument("time steps must be at least 1".into()));
    }
    if ops.len() != input_rates.len() {
        return Err(Error::Argument(format!(
            "{} layers but {} input rates",
            ops.len(),
            input_rates.len()
        )));
    }
    let t = time_steps as f64;
    let mut layers = Vec::with_capacity(ops.len());
    for (op, &rate) in ops.iter().zip(input_rates) {
        let macs = op.macs as f64;
        let snn = match rate {
            None => t * macs * constants.e_mac,
            Some(r) => {
                check_rate(r)?;
                t * r * macs * constants.e_ac
            }
        };
        layers.push(LayerEnergy {
            name: op.name.clone(),
            macs: op.macs,
            input_rate: rate,
            ann_joules: macs * constants.e_mac,
            snn_joules: snn,
        });
    }
    let e_ann = layers.iter().map(|l| l.ann_joules).sum();
    let e_snn = layers.iter().map(|l| l.snn_joules).sum();
    Ok((layers, e_ann, e_snn))
}

/// Energy report for a network whose first layer sees the analog signal
/// and whose layer `ℓ+1` is driven by the spikes of layer `ℓ`.
///
/// `rates` holds the output rate of each hidden (spiking) layer, so a
/// network of `n` layers needs `n − 1` rates. A trailing `n`-th rate is
/// accepted and reported but prices nothing, since the readout's output
/// feeds no further synapses.
pub fn estimate_energy(
    ops: &[LayerOps],
    rates: &[f64],
    time_steps: usize,
    constants: &EnergyConstants,
    options: EnergyOptions,
) -> Result<EnergyReport> {
    if ops.is_empty() {
        return Err(Error::Argument("no layers to price".into()));
    }
    let hidden = ops.len() - 1;
    if rates.len() != hidden && rates.len() != ops.len() {
        return Err(Error::Argument(format!(
            "{} layers take {hidden} hidden-layer rates, got {}",
            ops.len(),
            rates.len()
        )));
    }
    rates.iter().try_for_each(|&r| check_rate(r))?;
    let first = if options.first_layer_ac { Some(1.0) } else { None };
    let input_rates: Vec<Option<f64>> = std::iter::once(first)
        .chain(rates[..hidden].iter().map(|&r| Some(r)))
        .collect();
    let (layers, e_ann, e_snn) = estimate_energy_per_input(ops, &input_rates, time_steps, constants)?;
    Ok(EnergyReport {
        time_steps,
        constants: *constants,
        first_layer_ac: options.first_layer_ac,
        rates: rates.to_vec(),
        layers,
        e_ann,
        e_snn,
        ratio: if e_snn > 0.0 { e_ann / e_snn } else { f64::INFINITY },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    /// Mean over samples, steps and neurons, per spiking layer.
    pub per_layer: Vec<f64>,
    /// Neuron-count-weighted mean over layers.
    pub aggregate: f64,
}

/// Firing rates of an SNN's hidden layers on `samples`.
pub fn measure_rates(network: &Network, params: &[f64], samples: &[Sample]) -> Result<RateReport> {
    if network.backbone() == Backbone::Ann {
        return Err(Error::Usage("firing rates are undefined for the ANN backbone".into()));
    }
    if samples.is_empty() {
        return Err(Error::Argument("no samples to measure rates on".into()));
    }
    let signals: Vec<&[f64]> = samples.iter().map(|s| s.signal.as_slice()).collect();
    let spikes = network
        .predict(params, &signals)?
        .spikes
        .ok_or_else(|| Error::Usage("network produced no spike counts".into()))?;
    Ok(RateReport {
        per_layer: spikes.rates(),
        aggregate: spikes.aggregate_rate(),
    })
}
