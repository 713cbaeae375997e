//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Criteria 4, 6 and 8 share three default-config training runs (seeds 0, 1
//! and 2), which take several minutes each on one core.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::{Add, Mul, Neg, Sub};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikefed::config::DataConfig;
use spikefed::data::{decode_container, encode_container, export_dataset, ingest, synth_generate, IngestConfig, SynthConfig};
use spikefed::diagnostics::{envelope_grad_proxy, EnvelopeConfig};
use spikefed::energy::{count_ops, estimate_energy, estimate_energy_per_input, EnergyConstants, EnergyOptions, LayerOps};
use spikefed::experiment::{run_experiment, run_to_dir, ExperimentOutcome};
use spikefed::federated::{prox_sgd_step, LocalObjective};
use spikefed::model::LayerLayout;
use spikefed::spiking::{lif_layer_backward, LifLayerCache, Synapse};
use spikefed::{
    ArchitectureSpec, Backbone, Error, ExperimentConfig, Federation, LayerSpec, LifConfig, LifState, ModelParams,
    Network, Regime, Result, Sample, Tensor,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

// ---------------------------------------------------------------------------
// 1. gradient correctness on a differentiable twin

/// Forward-mode dual number.
#[derive(Debug, Clone, Copy)]
struct Dual {
    v: f64,
    d: f64,
}

impl Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }

    fn atan(self) -> Self {
        Dual { v: self.v.atan(), d: self.d / (1.0 + self.v * self.v) }
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual { v: e, d: self.d * e }
    }

    fn ln(self) -> Self {
        Dual { v: self.v.ln(), d: self.d / self.v }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: self.d + o.d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: self.d - o.d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { v: -self.v, d: -self.d }
    }
}

/// A dense-only spiking net described independently of the library.
struct TwinNet {
    sizes: Vec<usize>,
    lif: LifConfig,
}

/// Continuous activations of one twin layer.
struct TwinLayer {
    /// `[T×N_in]`, or one row for the analog first layer.
    input: Vec<f64>,
    pre: Vec<f64>,
    post: Vec<f64>,
    out: Vec<f64>,
}

impl TwinNet {
    fn phi(&self, p: Dual) -> Dual {
        let k = std::f64::consts::PI * self.lif.surrogate_eta / 2.0;
        let z = (p - Dual::c(self.lif.threshold)) * Dual::c(k);
        z.atan() * Dual::c(1.0 / std::f64::consts::PI) + Dual::c(0.5)
    }

    /// Cross-entropy of the twin. Spikes are replaced by `φ(P − U_th)`; the
    /// reset multiplies by `1 − g` with gates `g` held constant. Without
    /// `gates` they are taken from the hard threshold and returned.
    fn loss(
        &self,
        params: &[Dual],
        x: &[f64],
        label: usize,
        gates: Option<&[Vec<f64>]>,
    ) -> (Dual, Vec<Vec<f64>>, Vec<TwinLayer>) {
        let t_steps = self.lif.time_steps;
        let (leak, keep) = (Dual::c(self.lif.leak), Dual::c(1.0 - self.lif.leak));
        let hidden = self.sizes.len() - 2;
        let mut offset = 0;
        let mut input: Vec<Vec<Dual>> = vec![x.iter().map(|&v| Dual::c(v)).collect(); t_steps];
        let mut all_gates = Vec::new();
        let mut layers = Vec::new();
        for l in 0..hidden {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[offset..offset + n_in * n_out];
            let b = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut u = vec![Dual::c(0.0); n_out];
            let mut out = vec![vec![Dual::c(0.0); n_out]; t_steps];
            let mut g = vec![0.0; t_steps * n_out];
            let mut rec = TwinLayer {
                input: if l == 0 { x.to_vec() } else { input.iter().flatten().map(|d| d.v).collect() },
                pre: vec![0.0; t_steps * n_out],
                post: vec![0.0; t_steps * n_out],
                out: vec![0.0; t_steps * n_out],
            };
            for t in 0..t_steps {
                for j in 0..n_out {
                    let mut drive = b[j];
                    for i in 0..n_in {
                        drive = drive + w[j * n_in + i] * input[t][i];
                    }
                    let p = keep * u[j] + leak * drive;
                    let idx = t * n_out + j;
                    g[idx] = match gates {
                        Some(gs) => gs[l][idx],
                        None => f64::from(p.v >= self.lif.threshold),
                    };
                    out[t][j] = self.phi(p);
                    u[j] = p * Dual::c(1.0 - g[idx]);
                    rec.pre[idx] = p.v;
                    rec.post[idx] = u[j].v;
                    rec.out[idx] = out[t][j].v;
                }
            }
            all_gates.push(g);
            layers.push(rec);
            input = out;
        }
        let (n_in, classes) = (self.sizes[hidden], self.sizes[hidden + 1]);
        let inv_t = Dual::c(1.0 / t_steps as f64);
        let avg: Vec<Dual> = (0..n_in)
            .map(|i| input.iter().fold(Dual::c(0.0), |acc, row| acc + row[i]) * inv_t)
            .collect();
        let w = &params[offset..offset + n_in * classes];
        let b = &params[offset + n_in * classes..];
        let logits: Vec<Dual> = (0..classes)
            .map(|j| (0..n_in).fold(b[j], |acc, i| acc + w[j * n_in + i] * avg[i]))
            .collect();
        let max = logits.iter().map(|z| z.v).fold(f64::NEG_INFINITY, f64::max);
        let lse = logits
            .iter()
            .fold(Dual::c(0.0), |acc, &z| acc + (z - Dual::c(max)).exp())
            .ln()
            + Dual::c(max);
        (lse + -logits[label], all_gates, layers)
    }

    fn value(&self, params: &[f64], x: &[f64], label: usize, gates: &[Vec<f64>]) -> f64 {
        let p: Vec<Dual> = params.iter().map(|&v| Dual::c(v)).collect();
        self.loss(&p, x, label, Some(gates)).0.v
    }

    fn forward_mode_grad(&self, params: &[f64], x: &[f64], label: usize, gates: &[Vec<f64>]) -> Vec<f64> {
        let mut p: Vec<Dual> = params.iter().map(|&v| Dual::c(v)).collect();
        (0..params.len())
            .map(|i| {
                p[i].d = 1.0;
                let d = self.loss(&p, x, label, Some(gates)).0.d;
                p[i].d = 0.0;
                d
            })
            .collect()
    }
}

/// Library BPTT fed with the twin's continuous activations, plus the
/// readout gradient.
fn bptt_on_twin(
    layout: &[LayerLayout],
    params: &[f64],
    layers: &[TwinLayer],
    gates: &[Vec<f64>],
    label: usize,
    lif: &LifConfig,
) -> Result<Vec<f64>> {
    let t_steps = lif.time_steps;
    let hidden = layers.len();
    let mut grads = vec![0.0; params.len()];
    let last = &layers[hidden - 1];
    let out_l = &layout[hidden];
    let (n_in, classes) = (out_l.synapse.in_size(), out_l.synapse.out_size());
    let avg: Vec<f64> = (0..n_in)
        .map(|i| (0..t_steps).map(|t| last.out[t * n_in + i]).sum::<f64>() / t_steps as f64)
        .collect();
    let w = out_l.weights(params);
    let logits: Vec<f64> = (0..classes)
        .map(|j| out_l.bias(params)[j] + (0..n_in).map(|i| w[j * n_in + i] * avg[i]).sum::<f64>())
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let g_logits: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, v)| (v - max).exp() / z - f64::from(j == label))
        .collect();
    for j in 0..classes {
        for i in 0..n_in {
            grads[out_l.weight_offset + j * n_in + i] = g_logits[j] * avg[i];
        }
        grads[out_l.bias_offset + j] = g_logits[j];
    }
    let up_avg: Vec<f64> = (0..n_in)
        .map(|i| (0..classes).map(|j| w[j * n_in + i] * g_logits[j]).sum::<f64>())
        .collect();
    let mut upstream: Vec<f64> = (0..t_steps)
        .flat_map(|_| up_avg.iter().map(|g| g / t_steps as f64))
        .collect();
    for l in (0..hidden).rev() {
        let lay = &layout[l];
        let n = lay.synapse.out_size();
        let cache = LifLayerCache {
            inputs: layers[l].input.clone(),
            constant_input: l == 0,
            state: LifState {
                time_steps: t_steps,
                neurons: n,
                potentials: layers[l].post.clone(),
                pre_reset: layers[l].pre.clone(),
                spikes: gates[l].clone(),
            },
        };
        let up = Tensor::new(vec![t_steps, n], upstream)?;
        let g = lif_layer_backward(&cache, &lay.synapse, lay.weights(params), &up, lif)?;
        grads[lay.weight_offset..lay.weight_offset + g.weights.len()].copy_from_slice(&g.weights);
        grads[lay.bias_offset..lay.bias_offset + g.bias.len()].copy_from_slice(&g.bias);
        upstream = g.inputs.data().to_vec();
    }
    Ok(grads)
}

fn criterion_gradients() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let nets = 24;
    let h = 1e-5;
    let (mut worst_fd, mut worst_bptt) = (0.0f64, 0.0f64);
    let (mut gated, mut total) = (0usize, 0usize);
    for n in 0..nets {
        let hidden = rng.gen_range(1..=2);
        let mut sizes = vec![rng.gen_range(2..=8)];
        for _ in 0..hidden {
            sizes.push(rng.gen_range(2..=16));
        }
        sizes.push(rng.gen_range(2..=4));
        let lif = LifConfig {
            leak: rng.gen_range(0.2..=1.0),
            threshold: rng.gen_range(0.5..1.5),
            surrogate_eta: rng.gen_range(1.0..3.0),
            time_steps: rng.gen_range(1..=4),
        };
        let classes = *sizes.last().unwrap();
        let spec = ArchitectureSpec {
            input_channels: 1,
            input_len: sizes[0],
            num_classes: classes,
            layers: sizes[1..].iter().map(|&width| LayerSpec::Dense { width }).collect(),
            backbone: Backbone::Snn,
            lif,
            init_gain: 2.5,
        };
        let network = Network::new(spec)?;
        let params = network.init_params(n as u64).values;
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let label = rng.gen_range(0..classes);
        let twin = TwinNet { sizes, lif };

        let base: Vec<Dual> = params.iter().map(|&v| Dual::c(v)).collect();
        let (_, gates, layers) = twin.loss(&base, &x, label, None);
        gated += gates.iter().flatten().filter(|&&g| g == 1.0).count();
        total += gates.iter().map(Vec::len).sum::<usize>();
        let analytic = twin.forward_mode_grad(&params, &x, label, &gates);
        let bptt = bptt_on_twin(network.layout(), &params, &layers, &gates, label, &lif)?;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] = params[i] + h;
            let up = twin.value(&p, &x, label, &gates);
            p[i] = params[i] - h;
            let down = twin.value(&p, &x, label, &gates);
            let fd = (up - down) / (2.0 * h);
            let a = analytic[i];
            worst_fd = worst_fd.max((fd - a).abs() / a.abs().max(fd.abs()).max(1e-3));
            worst_bptt = worst_bptt.max((bptt[i] - a).abs() / a.abs().max(1.0));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_fd <= 1e-5 && worst_bptt <= 1e-10 && secs < 30.0;
    Ok(verdict(
        pass,
        format!(
            "{nets} nets, twin vs FD max rel {worst_fd:.2e} (<= 1e-5), BPTT vs twin max rel {worst_bptt:.2e} (<= 1e-10), \
             {gated}/{total} gated steps, {secs:.2}s (< 30s)"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 2. FedAvg reduction

fn criterion_fedavg_reduction() -> Result<Verdict> {
    let mut cfg = ExperimentConfig::smoke();
    cfg.train.rounds = 10;
    let data = cfg.load_data()?;
    let shape = cfg.data_shape()?;
    let mut compared = 0;
    for backbone in [Backbone::Snn, Backbone::Ann] {
        let network = Arc::new(Network::new(cfg.architecture(shape, backbone))?);
        let init = network.init_params(cfg.seed);
        let (pfl, fl) = match backbone {
            Backbone::Snn => (Regime::PflSnn, Regime::FlSnn),
            Backbone::Ann => (Regime::PflAnn, Regime::FlAnn),
        };
        let reduced = spikefed::TrainConfig { mu: 0.0, warm_start: false, ..cfg.train.clone() };
        let mut a = Federation::new(network.clone(), &data, pfl, reduced, cfg.seed, init.clone())?;
        let mut b = Federation::new(network, &data, fl, cfg.train.clone(), cfg.seed, init)?;
        for round in 1..=cfg.train.rounds {
            a.train_round()?;
            b.train_round()?;
            let same_clients = a.clients.iter().zip(&b.clients).all(|(x, y)| x.params.values == y.params.values);
            if a.server.global.values != b.server.global.values || !same_clients {
                return Ok(verdict(false, format!("{backbone:?} trajectories diverge at round {round}")));
            }
            compared += 1;
        }
    }
    Ok(verdict(true, format!("{compared} rounds bit-identical (SNN and ANN backbones, smoke config)")))
}

// ---------------------------------------------------------------------------
// 3. proximal-step algebra

fn criterion_prox_algebra() -> Result<Verdict> {
    let mut w = vec![1.0];
    prox_sgd_step(&mut w, &[0.5], &[0.2], 0.01, 1e-5);
    let hand = w[0] == 1.0 - 0.01 * (0.2 + 1e-5 * 0.5) && (w[0] - 0.99799995).abs() < 1e-15;

    let (lr, mu) = (0.1, 0.5);
    let global = [0.25, -1.0, 3.0];
    let mut v = vec![2.0, 0.5, -4.0];
    let start = v.clone();
    for _ in 0..100 {
        prox_sgd_step(&mut v, &global, &[0.0; 3], lr, mu);
    }
    let factor = (1.0f64 - lr * mu).powi(100);
    let err = (0..3)
        .map(|i| (v[i] - global[i] - factor * (start[i] - global[i])).abs())
        .fold(0.0, f64::max);
    Ok(verdict(
        hand && err <= 1e-12,
        format!("hand step {:.8} exact: {hand}; 100-step contraction max error {err:.2e} (<= 1e-12)", w[0]),
    ))
}

// ---------------------------------------------------------------------------
// 5. envelope proxy on quadratics

/// `F(v) = ½ Σ_i h_i (v_i − a_i)²`.
struct DiagQuadratic {
    h: Vec<f64>,
    a: Vec<f64>,
}

impl LocalObjective for DiagQuadratic {
    fn num_samples(&self) -> usize {
        1
    }

    fn batch_loss_grad(&self, v: &[f64], _: &[usize]) -> Result<(f64, Vec<f64>)> {
        let g: Vec<f64> = (0..v.len()).map(|i| self.h[i] * (v[i] - self.a[i])).collect();
        let f = (0..v.len()).map(|i| 0.5 * self.h[i] * (v[i] - self.a[i]).powi(2)).sum();
        Ok((f, g))
    }
}

fn flat_params(values: Vec<f64>) -> ModelParams {
    let n = values.len();
    let layout: Arc<[LayerLayout]> = vec![LayerLayout {
        synapse: Synapse::Dense { inputs: n - 1, outputs: 1 },
        weight_offset: 0,
        bias_offset: n - 1,
    }]
    .into();
    ModelParams::new(values, layout).expect("layout matches")
}

fn criterion_envelope() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let dim = rng.gen_range(2..=8);
        let clients = rng.gen_range(2..=5);
        let mu = rng.gen_range(0.05..3.0);
        let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let objs: Vec<DiagQuadratic> = (0..clients)
            .map(|_| DiagQuadratic {
                h: (0..dim).map(|_| rng.gen_range(0.2..4.0)).collect(),
                a: (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            })
            .collect();
        let raw: Vec<f64> = (0..clients).map(|_| rng.gen_range(0.5..2.0)).collect();
        let weights: Vec<f64> = raw.iter().map(|r| r / raw.iter().sum::<f64>()).collect();

        // ŵ_k,i = (h_i a_i + μ w_i)/(h_i + μ); ∇F̃_μ = μ Σ_k p_k (w − ŵ_k).
        let mut want = vec![0.0; dim];
        for (o, p) in objs.iter().zip(&weights) {
            for i in 0..dim {
                let prox = (o.h[i] * o.a[i] + mu * w[i]) / (o.h[i] + mu);
                want[i] += mu * p * (w[i] - prox);
            }
        }
        let want_norm = want.iter().map(|v| v * v).sum::<f64>().sqrt();

        let lr = 1.0 / (4.0 + mu);
        let cfg = EnvelopeConfig { prox_steps: 2000, step_fraction: 1.0, decay: 0.0 };
        let d: Vec<&dyn LocalObjective> = objs.iter().map(|o| o as &dyn LocalObjective).collect();
        let rep = envelope_grad_proxy(0, &flat_params(w), &d, &weights, mu, lr, &cfg)?;
        worst = worst.max((rep.proxy_norm - want_norm).abs());
    }
    Ok(verdict(worst <= 1e-6, format!("10 random quadratics, max |proxy − closed form| {worst:.2e} (<= 1e-6)")))
}

// ---------------------------------------------------------------------------
// 7. energy model

fn criterion_energy() -> Result<Verdict> {
    let cfg = ExperimentConfig::default();
    let spec = cfg.architecture(cfg.data_shape()?, Backbone::Snn);
    let ops = count_ops(&spec)?;
    let rates = [0.106, 0.063, 0.058, 0.253];
    let constants = EnergyConstants::default();
    let report = estimate_energy(&ops, &rates, 6, &constants, EnergyOptions { first_layer_ac: false })?;
    let ac_first = estimate_energy(&ops, &rates, 6, &constants, EnergyOptions { first_layer_ac: true })?;
    let hand = [LayerOps { name: "dense".into(), macs: 1000, neurons: 10 }];
    let (_, _, e_hand) = estimate_energy_per_input(&hand, &[Some(0.5)], 6, &constants)?;
    let in_band = (4.8..=8.1).contains(&report.ratio);
    let hand_exact = e_hand == 2.7e-9;
    let total_macs: u64 = ops.iter().map(|o| o.macs).sum();
    Ok(verdict(
        in_band && hand_exact,
        format!(
            "ratio {:.3} (band [4.8, 8.1]); E_ann {:.3e} J, E_snn {:.3e} J over {total_macs} MACs; \
             first layer as AC: ratio {:.3}; hand example {e_hand:e} J exact: {hand_exact}",
            report.ratio, report.e_ann, report.e_snn, ac_first.ratio
        ),
    ))
}

// ---------------------------------------------------------------------------
// 9. determinism

fn criterion_determinism() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let mut cfg = ExperimentConfig::smoke();
    cfg.train.rounds = 4;
    cfg.output_dir = dir.path().join("first");
    run_to_dir(&cfg)?;
    let resolved = std::fs::read_to_string(cfg.output_dir.join("config.resolved.toml"))?;
    let mut again = ExperimentConfig::from_toml(&resolved)?;
    again.output_dir = dir.path().join("second");
    run_to_dir(&again)?;
    let mut same = Vec::new();
    for name in ["accuracy.csv", "drift.csv"] {
        let a = std::fs::read(cfg.output_dir.join(name))?;
        let b = std::fs::read(again.output_dir.join(name))?;
        same.push((name, a == b, a.len()));
    }
    let pass = same.iter().all(|s| s.1);
    let mut detail = String::new();
    for (name, eq, len) in same {
        let _ = write!(detail, "{name} ({len} bytes) identical: {eq}; ");
    }
    detail.push_str("second run read the first run's resolved config");
    Ok(verdict(pass, detail))
}

// ---------------------------------------------------------------------------
// 10. container format

fn criterion_container() -> Result<Verdict> {
    let cfg = SynthConfig::default();
    let data = synth_generate(&cfg, 5)?.dataset;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("data.sfed");
    export_dataset(&path, &data)?;
    let back = ingest(
        &path,
        &IngestConfig {
            test_fraction: cfg.test_per_client as f64 / (cfg.train_per_client + cfg.test_per_client) as f64,
            shuffle_seed: None,
            normalize: false,
        },
    )?;
    let bitwise = back.clients.len() == data.clients.len()
        && back.clients.iter().zip(&data.clients).all(|(a, b)| {
            let bits = |s: &[Sample]| -> Vec<(usize, Vec<u64>)> {
                s.iter().map(|x| (x.label, x.signal.iter().map(|v| v.to_bits()).collect())).collect()
            };
            bits(&a.train) == bits(&b.train) && bits(&a.test) == bits(&b.test)
        });

    let s = Sample { signal: vec![0.5; 8], label: 3 };
    let good = encode_container(2, 4, 4, &[vec![s.clone(), s]])?;
    let truncated = match decode_container(&good[..good.len() - 5]) {
        Err(Error::Ingest { message, .. }) => message.contains("expected") && message.contains("available"),
        _ => false,
    };
    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"SFEX");
    let magic = matches!(decode_container(&bad), Err(Error::Ingest { offset: 0, ref message }) if message.contains("magic"));
    let mut bad = good.clone();
    let label_at = good.len() - (2 + 8 * 4);
    bad[label_at..label_at + 2].copy_from_slice(&7u16.to_le_bytes());
    let label = match decode_container(&bad) {
        Err(Error::Ingest { offset, message }) => offset as usize == label_at && message.contains("record 1"),
        _ => false,
    };
    Ok(verdict(
        bitwise && truncated && magic && label,
        format!(
            "3-client roundtrip bitwise: {bitwise}; truncation: {truncated}; bad magic: {magic}; \
             out-of-range label: {label}"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 4, 6, 8. default-config training runs

struct SeedRun {
    seed: u64,
    secs: f64,
    outcome: ExperimentOutcome,
}

fn train_seeds() -> Result<Vec<SeedRun>> {
    let base = ExperimentConfig::default();
    let DataConfig::Synthetic(synth) = &base.data else {
        unreachable!("the default config is synthetic")
    };
    assert_eq!((synth.num_clients, synth.heterogeneity), (3, 0.6));
    let mut out = Vec::new();
    for seed in 0..3 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        if seed > 0 {
            // diagnostics are checked on the first seed only
            cfg.diagnostics.every = 0;
        }
        let start = Instant::now();
        let outcome = run_experiment(&cfg, &mut Vec::new())?;
        let secs = start.elapsed().as_secs_f64();
        eprintln!("  seed {seed}: {secs:.0}s");
        out.push(SeedRun { seed, secs, outcome });
    }
    Ok(out)
}

fn criterion_drift(runs: &[SeedRun]) -> Verdict {
    let run = &runs[0];
    let mut checked = 0;
    let mut violations = Vec::new();
    let mut tightest = f64::INFINITY;
    for r in &run.outcome.runs {
        for d in &r.drift {
            checked += 1;
            let bound = 4.0 * d.client_grad_norms.iter().cloned().fold(0.0, f64::max).powi(2);
            if d.delta > bound {
                violations.push(format!("{} r{}", r.regime, d.round));
            }
            if bound > 0.0 {
                tightest = tightest.min((bound - d.delta) / bound);
            }
        }
    }
    let pass = checked > 0 && violations.is_empty();
    verdict(
        pass,
        format!(
            "seed {}: {checked} diagnostics rounds over {} regimes, {} violations; smallest relative slack {tightest:.3}",
            run.seed,
            run.outcome.runs.len(),
            violations.len()
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_regime_ordering(runs: &[SeedRun]) -> Verdict {
    let acc = |regime: Regime| -> Vec<f64> {
        runs.iter()
            .map(|s| {
                let r = s.outcome.runs.iter().find(|r| r.regime == regime).expect("all regimes run");
                100.0 * r.final_accuracy()
            })
            .collect()
    };
    let (ps, pa, fs, fa) = (acc(Regime::PflSnn), acc(Regime::PflAnn), acc(Regime::FlSnn), acc(Regime::FlAnn));
    let (mps, mpa, mfs, mfa) = (median(ps.clone()), median(pa.clone()), median(fs.clone()), median(fa.clone()));
    let secs = median(runs.iter().map(|s| s.secs).collect());
    let checks = [
        mps >= mpa - 2.0,
        mps > mfs + 5.0,
        mpa > mfa + 5.0,
        mps >= 85.0,
        secs <= 600.0,
    ];
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.1}")).collect::<Vec<_>>().join("/");
    verdict(
        checks.iter().all(|&c| c),
        format!(
            "median over seeds 0-2: PFL-SNN {mps:.2} [{}], PFL-ANN {mpa:.2} [{}], FL-SNN {mfs:.2} [{}], \
             FL-ANN {mfa:.2} [{}]; checks (SNN>=ANN-2, SNN gap>5, ANN gap>5, SNN>=85, <=600s) {checks:?}; \
             median wall {secs:.0}s",
            fmt(&ps),
            fmt(&pa),
            fmt(&fs),
            fmt(&fa)
        ),
    )
}

fn criterion_sparsity(runs: &[SeedRun]) -> Result<Verdict> {
    let mut detail = String::new();
    let mut reported = 0;
    for s in runs {
        for r in &s.outcome.runs {
            if let Some(rates) = &r.rates {
                reported += 1;
                let per: Vec<String> = rates.per_layer.iter().map(|v| format!("{v:.3}")).collect();
                let _ = write!(detail, "seed {} {}: rho {:.4} [{}]; ", s.seed, r.regime, rates.aggregate, per.join(", "));
            }
        }
    }

    // E_snn must not decrease when any rate or T grows.
    let cfg = ExperimentConfig::default();
    let ops = count_ops(&cfg.architecture(cfg.data_shape()?, Backbone::Snn))?;
    let constants = EnergyConstants::default();
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let hidden = ops.len() - 1;
    let mut monotone = true;
    let mut points = 0;
    for t in 1..=8 {
        for layer in 0..hidden {
            let mut prev = f64::NEG_INFINITY;
            for &r in &grid {
                let mut rates = vec![0.3; hidden];
                rates[layer] = r;
                for first_layer_ac in [false, true] {
                    let e = estimate_energy(&ops, &rates, t, &constants, EnergyOptions { first_layer_ac })?;
                    let longer = estimate_energy(&ops, &rates, t + 1, &constants, EnergyOptions { first_layer_ac })?;
                    monotone &= longer.e_snn >= e.e_snn && e.ratio > 0.0;
                    points += 1;
                }
                let e = estimate_energy(&ops, &rates, t, &constants, EnergyOptions::default())?.e_snn;
                monotone &= e >= prev;
                prev = e;
            }
        }
    }
    let _ = write!(detail, "monotone on {points} (rho, T) points: {monotone}; reference rho 0.12");
    Ok(verdict(reported > 0 && monotone, detail))
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Result<Verdict>) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => verdict(false, format!("error: {e}")),
        Err(_) => verdict(false, "panicked".into()),
    }
}

fn main() -> ExitCode {
    let mut results: BTreeMap<u32, (&str, Verdict)> = BTreeMap::new();
    let mut record = |id: u32, name: &'static str, v: Verdict| {
        println!("[{}] {id:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.insert(id, (name, v));
    };

    record(1, "gradient correctness", guarded(criterion_gradients));
    record(2, "fedavg reduction", guarded(criterion_fedavg_reduction));
    record(3, "proximal step algebra", guarded(criterion_prox_algebra));
    record(5, "envelope proxy oracle", guarded(criterion_envelope));
    record(7, "energy model", guarded(criterion_energy));
    record(9, "determinism", guarded(criterion_determinism));
    record(10, "container format", guarded(criterion_container));

    eprintln!("training three seeds on the default config...");
    match catch_unwind(AssertUnwindSafe(train_seeds)) {
        Ok(Ok(runs)) => {
            record(4, "drift bound", criterion_drift(&runs));
            record(6, "regime ordering", criterion_regime_ordering(&runs));
            record(8, "sparsity measurement", guarded(|| criterion_sparsity(&runs)));
        }
        Ok(Err(e)) => {
            for (id, name) in [(4, "drift bound"), (6, "regime ordering"), (8, "sparsity measurement")] {
                record(id, name, verdict(false, format!("training failed: {e}")));
            }
        }
        Err(_) => {
            for (id, name) in [(4, "drift bound"), (6, "regime ordering"), (8, "sparsity measurement")] {
                record(id, name, verdict(false, "training panicked".into()));
            }
        }
    }

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, (_, v))| !v.pass)
        .map(|(id, (name, _))| format!("{id} ({name})"))
        .collect();
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
