//! Network architectures with a spiking (LIF) or ReLU backbone over one shared
//! parameter layout.
//!
//! Every layer but the last is a hidden layer: LIF neurons for [`Backbone::Snn`],
//! ReLU for [`Backbone::Ann`]. The last layer is a dense readout. On the SNN
//! path the analog input drives layer 1 identically at every step and the
//! readout is applied to the time-averaged spikes of the last hidden layer,
//! which equals the time average of its per-step synaptic drive.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax_cross_entropy, ConvGeom, ParamGrad};
use crate::spiking::{lif_layer_backward_accum, lif_layer_run, LifConfig, LifLayerCache, Synapse};

/// Samples per work unit when a batch is split across threads. Fixed so the
/// floating-point reduction order never depends on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv1d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Dense {
        width: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Snn,
    Ann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub input_channels: usize,
    pub input_len: usize,
    pub num_classes: usize,
    /// Trainable layers in order; the last must be `Dense { width: num_classes }`.
    pub layers: Vec<LayerSpec>,
    pub backbone: Backbone,
    #[serde(default)]
    pub lif: LifConfig,
    /// Multiplier on the fan-in uniform bound `√(6/fan_in)`. Values above 1
    /// keep spike-driven layers out of the silent regime at initialization.
    #[serde(default = "default_init_gain")]
    pub init_gain: f64,
}

fn default_init_gain() -> f64 {
    2.5
}

impl ArchitectureSpec {
    /// The four-layer default: two strided convolutions, one hidden dense
    /// layer and the readout.
    pub fn default_layers(num_classes: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv1d {
                out_channels: 16,
                kernel: 7,
                stride: 2,
            },
            LayerSpec::Conv1d {
                out_channels: 32,
                kernel: 5,
                stride: 2,
            },
            LayerSpec::Dense { width: 64 },
            LayerSpec::Dense { width: num_classes },
        ]
    }

    pub fn new_default(
        input_channels: usize,
        input_len: usize,
        num_classes: usize,
        backbone: Backbone,
    ) -> Self {
        Self {
            input_channels,
            input_len,
            num_classes,
            layers: Self::default_layers(num_classes),
            backbone,
            lif: LifConfig::default(),
            init_gain: default_init_gain(),
        }
    }

    pub fn with_backbone(&self, backbone: Backbone) -> Self {
        Self {
            backbone,
            ..self.clone()
        }
    }

    /// Resolves every layer's synaptic geometry, checking the chain end to end.
    pub fn synapses(&self) -> Result<Vec<Synapse>> {
        if self.input_channels == 0 || self.input_len == 0 {
            return Err(Error::config("model.input", "input extents must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "need at least two classes"));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return Err(Error::config("model.init_gain", "must be positive"));
        }
        if self.backbone == Backbone::Snn {
            self.lif.validate()?;
        }
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::config("model.layers", "at least one layer is required"))?;
        if *last != (LayerSpec::Dense { width: self.num_classes }) {
            return Err(Error::config(
                "model.layers",
                format!("last layer must be dense with width {}", self.num_classes),
            ));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        // (channels, length) while still convolutional, flattened after.
        let (mut channels, mut len, mut flat) = (self.input_channels, self.input_len, false);
        for (i, layer) in self.layers.iter().enumerate() {
            let field = format!("model.layers[{i}]");
            match *layer {
                LayerSpec::Conv1d {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    if flat {
                        return Err(Error::config(field, "convolution after a dense layer"));
                    }
                    if out_channels == 0 || stride == 0 || kernel == 0 {
                        return Err(Error::config(field, "channels, kernel and stride must be positive"));
                    }
                    let g = ConvGeom::new(channels, len, out_channels, kernel, stride)
                        .map_err(|e| Error::config(field, e.to_string()))?;
                    channels = out_channels;
                    len = g.out_len;
                    out.push(Synapse::Conv(g));
                }
                LayerSpec::Dense { width } => {
                    if width == 0 {
                        return Err(Error::config(field, "width must be positive"));
                    }
                    out.push(Synapse::Dense {
                        inputs: channels * len,
                        outputs: width,
                    });
                    flat = true;
                    channels = width;
                    len = 1;
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.synapses().map(|_| ())
    }

    pub fn input_size(&self) -> usize {
        self.input_channels * self.input_len
    }
}

/// Where one layer's weights and biases live inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub synapse: Synapse,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerLayout {
    pub fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.weight_offset..self.weight_offset + self.synapse.weight_len()]
    }

    pub fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.bias_offset..self.bias_offset + self.synapse.bias_len()]
    }

    fn split_mut<'a>(&self, grads: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        // weights immediately precede their biases
        let (w, b) = grads[self.weight_offset..self.bias_offset + self.synapse.bias_len()]
            .split_at_mut(self.synapse.weight_len());
        (w, b)
    }
}

fn build_layout(synapses: &[Synapse]) -> Vec<LayerLayout> {
    let mut offset = 0;
    synapses
        .iter()
        .map(|&synapse| {
            let weight_offset = offset;
            let bias_offset = weight_offset + synapse.weight_len();
            offset = bias_offset + synapse.bias_len();
            LayerLayout {
                synapse,
                weight_offset,
                bias_offset,
            }
        })
        .collect()
}

/// Flat parameter vector plus the layout that gives it meaning. This is the
/// unit exchanged between clients and the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
    layout: Arc<[LayerLayout]>,
}

impl ModelParams {
    pub fn new(values: Vec<f64>, layout: Arc<[LayerLayout]>) -> Result<Self> {
        let expected = layout
            .last()
            .map(|l| l.bias_offset + l.synapse.bias_len())
            .unwrap_or(0);
        if values.len() != expected {
            return Err(Error::dim(format!(
                "layout holds {expected} parameters, got {}",
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn layout(&self) -> &Arc<[LayerLayout]> {
        &self.layout
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Per-layer `(weights, bias)` copies.
    pub fn unflatten(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layout
            .iter()
            .map(|l| (l.weights(&self.values).to_vec(), l.bias(&self.values).to_vec()))
            .collect()
    }

    pub fn flatten(layers: &[(Vec<f64>, Vec<f64>)], layout: Arc<[LayerLayout]>) -> Result<Self> {
        let values: Vec<f64> = layers.iter().flat_map(|(w, b)| w.iter().chain(b)).copied().collect();
        Self::new(values, layout)
    }
}

/// Compiled architecture: geometry and layout, no parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: ArchitectureSpec,
    layout: Arc<[LayerLayout]>,
}

/// Per-sample record of a forward pass.
#[derive(Debug, Clone)]
enum LayerTrace {
    Relu { input: Vec<f64>, pre: Vec<f64> },
    Spiking(LifLayerCache),
}

#[derive(Debug, Clone)]
struct SampleTrace {
    hidden: Vec<LayerTrace>,
    /// Input to the readout layer.
    readout_input: Vec<f64>,
    logits: Vec<f64>,
}

impl Network {
    pub fn new(spec: ArchitectureSpec) -> Result<Self> {
        let synapses = spec.synapses()?;
        Ok(Self {
            layout: build_layout(&synapses).into(),
            spec,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<[LayerLayout]> {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout
            .last()
            .map(|l| l.bias_offset + l.synapse.bias_len())
            .unwrap_or(0)
    }

    pub fn backbone(&self) -> Backbone {
        self.spec.backbone
    }

    /// Number of hidden layers, i.e. LIF layers on the SNN backbone.
    pub fn hidden_layers(&self) -> usize {
        self.layout.len() - 1
    }

    /// Fan-in uniform (Kaiming) initialization scaled by the spec's
    /// `init_gain`; biases start at zero. The
    /// draw sequence depends only on the layout, so both backbones get the
    /// same vector for the same seed.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.param_count()];
        for l in self.layout.iter() {
            let bound = self.spec.init_gain * (6.0 / l.synapse.fan_in() as f64).sqrt();
            for w in &mut values[l.weight_offset..l.bias_offset] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        ModelParams::new(values, self.layout.clone()).expect("layout-sized vector")
    }

    pub fn zero_params(&self) -> ModelParams {
        ModelParams::new(vec![0.0; self.param_count()], self.layout.clone())
            .expect("layout-sized vector")
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        if sample.signal.len() != self.spec.input_size() {
            return Err(Error::dim(format!(
                "sample has {} values, model expects {}×{}",
                sample.signal.len(),
                self.spec.input_channels,
                self.spec.input_len
            )));
        }
        if sample.label >= self.spec.num_classes {
            return Err(Error::Argument(format!(
                "label {} out of range for {} classes",
                sample.label, self.spec.num_classes
            )));
        }
        Ok(())
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim(format!(
                "network has {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }

    fn trace(&self, params: &[f64], signal: &[f64]) -> SampleTrace {
        let hidden_count = self.hidden_layers();
        let mut hidden = Vec::with_capacity(hidden_count);
        let readout_input = match self.spec.backbone {
            Backbone::Ann => {
                let mut act = signal.to_vec();
                for l in &self.layout[..hidden_count] {
                    let mut pre = vec![0.0; l.synapse.out_size()];
                    l.synapse
                        .forward_into(&act, l.weights(params), l.bias(params), &mut pre);
                    let next = pre.iter().map(|&z| z.max(0.0)).collect();
                    hidden.push(LayerTrace::Relu { input: act, pre });
                    act = next;
                }
                act
            }
            Backbone::Snn => {
                let cfg = &self.spec.lif;
                let steps = cfg.time_steps;
                let mut input = signal.to_vec();
                let mut constant = true;
                for l in &self.layout[..hidden_count] {
                    let cache = lif_layer_run(
                        &l.synapse,
                        l.weights(params),
                        l.bias(params),
                        input,
                        constant,
                        cfg,
                    );
                    input = cache.state.spikes.clone();
                    constant = false;
                    hidden.push(LayerTrace::Spiking(cache));
                }
                if constant {
                    input
                } else {
                    time_average(&input, steps)
                }
            }
        };
        let out = &self.layout[hidden_count];
        let mut logits = vec![0.0; self.spec.num_classes];
        out.synapse
            .forward_into(&readout_input, out.weights(params), out.bias(params), &mut logits);
        SampleTrace {
            hidden,
            readout_input,
            logits,
        }
    }

    /// Accumulates `scale·∂CE/∂params` for one traced sample into `grads`.
    fn backprop(&self, params: &[f64], trace: &SampleTrace, grad_logits: &[f64], grads: &mut [f64]) {
        let hidden_count = self.hidden_layers();
        let out = &self.layout[hidden_count];
        let mut upstream = vec![0.0; trace.readout_input.len()];
        {
            let (gw, gb) = out.split_mut(grads);
            out.synapse.backward_accum(
                &trace.readout_input,
                out.weights(params),
                grad_logits,
                Some(&mut upstream),
                gw,
                gb,
            );
        }
        match self.spec.backbone {
            Backbone::Ann => {
                for (i, l) in self.layout[..hidden_count].iter().enumerate().rev() {
                    let LayerTrace::Relu { input, pre } = &trace.hidden[i] else {
                        unreachable!("ANN traces hold ReLU layers")
                    };
                    for (g, &z) in upstream.iter_mut().zip(pre) {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    let mut down = if i > 0 { vec![0.0; input.len()] } else { Vec::new() };
                    let (gw, gb) = l.split_mut(grads);
                    l.synapse.backward_accum(
                        input,
                        l.weights(params),
                        &upstream,
                        (i > 0).then_some(down.as_mut_slice()),
                        gw,
                        gb,
                    );
                    upstream = down;
                }
            }
            Backbone::Snn => {
                let cfg = &self.spec.lif;
                let steps = cfg.time_steps;
                if hidden_count > 0 {
                    // Readout sees the mean over steps: each step gets 1/T.
                    let inv = 1.0 / steps as f64;
                    upstream = (0..steps)
                        .flat_map(|_| upstream.iter().map(move |g| g * inv))
                        .collect();
                }
                for (i, l) in self.layout[..hidden_count].iter().enumerate().rev() {
                    let LayerTrace::Spiking(cache) = &trace.hidden[i] else {
                        unreachable!("SNN traces hold spiking layers")
                    };
                    let mut down = if i > 0 { vec![0.0; cache.inputs.len()] } else { Vec::new() };
                    let (gw, gb) = l.split_mut(grads);
                    lif_layer_backward_accum(
                        cache,
                        &l.synapse,
                        l.weights(params),
                        &upstream,
                        cfg,
                        gw,
                        gb,
                        (i > 0).then_some(down.as_mut_slice()),
                    );
                    upstream = down;
                }
            }
        }
    }

    /// Mean cross-entropy over `batch` and its gradient. Batches are split in
    /// fixed-size chunks whose partial sums are combined in order, so results
    /// are bit-identical for any thread count.
    pub fn loss_and_grad(&self, params: &[f64], batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        for s in batch {
            self.check_sample(s)?;
        }
        let n = params.len();
        let partials: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grads = vec![0.0; n];
                let mut loss = 0.0;
                for s in chunk {
                    let trace = self.trace(params, &s.signal);
                    let (l, g) = softmax_cross_entropy(&trace.logits, s.label)
                        .expect("labels checked above");
                    loss += l;
                    self.backprop(params, &trace, &g, &mut grads);
                }
                (loss, grads)
            })
            .collect();
        let inv = 1.0 / batch.len() as f64;
        let mut total = vec![0.0; n];
        let mut loss = 0.0;
        for (l, g) in partials {
            loss += l;
            for (t, v) in total.iter_mut().zip(&g) {
                *t += v;
            }
        }
        for t in &mut total {
            *t *= inv;
        }
        Ok((loss * inv, total))
    }

    pub fn loss(&self, params: &[f64], batch: &[&Sample]) -> Result<f64> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let mut total = 0.0;
        for s in batch {
            self.check_sample(s)?;
            let trace = self.trace(params, &s.signal);
            total += softmax_cross_entropy(&trace.logits, s.label)?.0;
        }
        Ok(total / batch.len() as f64)
    }

    /// Decoded logits for one input signal.
    pub fn logits(&self, params: &[f64], signal: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if signal.len() != self.spec.input_size() {
            return Err(Error::dim("signal size does not match the input layer"));
        }
        Ok(self.trace(params, signal).logits)
    }

    /// Argmax predictions (lowest index wins ties) plus spike statistics on
    /// the SNN backbone.
    pub fn predict(&self, params: &[f64], signals: &[&[f64]]) -> Result<Prediction> {
        self.check_params(params)?;
        if let Some(bad) = signals.iter().find(|s| s.len() != self.spec.input_size()) {
            return Err(Error::dim(format!(
                "signal has {} values, model expects {}",
                bad.len(),
                self.spec.input_size()
            )));
        }
        let per_sample: Vec<(usize, Vec<f64>)> = signals
            .par_iter()
            .map(|s| {
                let trace = self.trace(params, s);
                let counts = trace
                    .hidden
                    .iter()
                    .filter_map(|h| match h {
                        LayerTrace::Spiking(c) => Some(c.state.spike_count()),
                        LayerTrace::Relu { .. } => None,
                    })
                    .collect();
                (argmax(&trace.logits), counts)
            })
            .collect();
        let labels = per_sample.iter().map(|(l, _)| *l).collect();
        let spikes = match self.spec.backbone {
            Backbone::Ann => None,
            Backbone::Snn => {
                let mut counts = SpikeCounts::new(self, 0);
                for (_, c) in &per_sample {
                    counts.add_sample(c);
                }
                Some(counts)
            }
        };
        Ok(Prediction { labels, spikes })
    }

    /// Fraction of correctly classified samples.
    pub fn accuracy(&self, params: &[f64], samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Argument("no samples to evaluate".into()));
        }
        let signals: Vec<&[f64]> = samples.iter().map(|s| s.signal.as_slice()).collect();
        let pred = self.predict(params, &signals)?;
        let correct = pred
            .labels
            .iter()
            .zip(samples)
            .filter(|(p, s)| **p == s.label)
            .count();
        Ok(correct as f64 / samples.len() as f64)
    }
}

fn time_average(rows: &[f64], steps: usize) -> Vec<f64> {
    let n = rows.len() / steps;
    let mut mean = vec![0.0; n];
    for row in rows.chunks_exact(n) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv = 1.0 / steps as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

/// Spike totals per LIF layer over a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeCounts {
    pub spikes: Vec<f64>,
    /// Neurons per layer (d_ℓ).
    pub neurons: Vec<usize>,
    pub time_steps: usize,
    pub samples: usize,
}

impl SpikeCounts {
    fn new(net: &Network, samples: usize) -> Self {
        let neurons: Vec<usize> = net.layout[..net.hidden_layers()]
            .iter()
            .map(|l| l.synapse.out_size())
            .collect();
        Self {
            spikes: vec![0.0; neurons.len()],
            neurons,
            time_steps: net.spec.lif.time_steps,
            samples,
        }
    }

    fn add_sample(&mut self, counts: &[f64]) {
        for (a, c) in self.spikes.iter_mut().zip(counts) {
            *a += c;
        }
        self.samples += 1;
    }

    pub fn merge(&mut self, other: &SpikeCounts) {
        for (a, c) in self.spikes.iter_mut().zip(&other.spikes) {
            *a += c;
        }
        self.samples += other.samples;
    }

    /// ρ_ℓ: mean over samples, steps and neurons.
    pub fn rates(&self) -> Vec<f64> {
        self.spikes
            .iter()
            .zip(&self.neurons)
            .map(|(&s, &n)| {
                if self.samples == 0 {
                    0.0
                } else {
                    s / (self.samples * self.time_steps * n) as f64
                }
            })
            .collect()
    }

    /// Neuron-count-weighted mean rate ρ̄.
    pub fn aggregate_rate(&self) -> f64 {
        let slots: usize = self.neurons.iter().sum::<usize>() * self.samples * self.time_steps;
        if slots == 0 {
            0.0
        } else {
            self.spikes.iter().sum::<f64>() / slots as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// `None` on the ANN backbone.
    pub spikes: Option<SpikeCounts>,
}

impl Prediction {
    pub fn firing_rates(&self) -> Option<Vec<f64>> {
        self.spikes.as_ref().map(SpikeCounts::rates)
    }
}

/// Opaque record of a [`Model::forward_loss`] call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    traces: Vec<SampleTrace>,
    grad_logits: Vec<Vec<f64>>,
}

/// A network together with its current parameters.
#[derive(Debug, Clone)]
pub struct Model {
    network: Arc<Network>,
    params: ModelParams,
    generation: u64,
}

pub fn build_model(spec: ArchitectureSpec, seed: u64) -> Result<Model> {
    let network = Arc::new(Network::new(spec)?);
    let params = network.init_params(seed);
    Ok(Model {
        network,
        params,
        generation: 0,
    })
}

impl Model {
    pub fn from_parts(network: Arc<Network>, params: ModelParams) -> Result<Self> {
        if params.layout().as_ref() != network.layout().as_ref() {
            return Err(Error::Protocol("parameter layout does not match network".into()));
        }
        Ok(Self {
            network,
            params,
            generation: 0,
        })
    }

    pub fn network(&self) -> &Arc<Network> {
        &self.network
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        self.network.spec()
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn set_params(&mut self, params: ModelParams) -> Result<()> {
        if !params.same_layout(&self.params) {
            return Err(Error::Protocol("parameter layout mismatch".into()));
        }
        self.params = params;
        self.generation += 1;
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.values.clone()
    }

    /// Mean loss over `batch` and the cache needed by [`Model::backward`].
    pub fn forward_loss(&self, batch: &[&Sample]) -> Result<(f64, ForwardCache)> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let net = &self.network;
        let params = &self.params.values;
        let mut traces = Vec::with_capacity(batch.len());
        let mut grad_logits = Vec::with_capacity(batch.len());
        let mut total = 0.0;
        for s in batch {
            net.check_sample(s)?;
            let trace = net.trace(params, &s.signal);
            let (l, g) = softmax_cross_entropy(&trace.logits, s.label)?;
            total += l;
            traces.push(trace);
            grad_logits.push(g);
        }
        Ok((
            total / batch.len() as f64,
            ForwardCache {
                generation: self.generation,
                traces,
                grad_logits,
            },
        ))
    }

    pub fn backward(&self, cache: &ForwardCache) -> Result<ParamGrad> {
        if cache.generation != self.generation {
            return Err(Error::Usage(
                "forward cache predates the current parameters".into(),
            ));
        }
        let params = &self.params.values;
        let inv = 1.0 / cache.traces.len() as f64;
        let mut grads = vec![0.0; params.len()];
        for (trace, g) in cache.traces.iter().zip(&cache.grad_logits) {
            let scaled: Vec<f64> = g.iter().map(|v| v * inv).collect();
            self.network.backprop(params, trace, &scaled, &mut grads);
        }
        ParamGrad::new(params.clone(), grads)
    }

    pub fn predict(&self, signals: &[&[f64]]) -> Result<Prediction> {
        self.network.predict(&self.params.values, signals)
    }
}

/// On-disk form of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub spec: ArchitectureSpec,
    pub params: Vec<f64>,
}

impl SavedModel {
    pub fn from_model(model: &Model) -> Self {
        Self {
            spec: model.spec().clone(),
            params: model.flatten(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        let network = Arc::new(Network::new(self.spec)?);
        let params = ModelParams::new(self.params, network.layout().clone())?;
        Model::from_parts(network, params)
    }
}
