//! Runs the regime matrix of an [`ExperimentConfig`] and writes its
//! artifacts: `metrics.jsonl`, `accuracy.csv`, `drift.csv`, `energy.json`,
//! `diagnostics.json`, `config.resolved.toml` and saved models.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{Dataset, Sample};
use crate::diagnostics::{
    drift_from_gradients, envelope_grad_proxy, estimate_constants, sparsity_analysis, ConstantEstimates,
    DriftReport, EnvelopeReport, GradientSnapshot, SparsityAnalysis,
};
use crate::energy::{count_ops, estimate_energy, EnergyReport, LayerOps, RateReport};
use crate::error::{Error, Result};
use crate::federated::{stream_seed, Federation, LocalObjective, NetworkObjective, Regime, RoundMetrics};
use crate::model::{Backbone, ModelParams, Network, SavedModel, SpikeCounts};

/// One scalar observation in the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub regime: Regime,
    pub round: usize,
    /// Client id, or `"server"` for federation-wide values.
    pub client: String,
    pub metric: String,
    pub value: f64,
    /// Seconds since the experiment started.
    pub wall_clock: f64,
}

pub trait MetricsSink {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Writes one JSON object per line, flushing after every record.
pub struct JsonlSink<W: Write> {
    out: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Everything one regime produced.
pub struct RegimeRun {
    pub regime: Regime,
    pub network: Arc<Network>,
    pub rounds: Vec<RoundMetrics>,
    pub drift: Vec<DriftReport>,
    pub envelope: Vec<EnvelopeReport>,
    pub sparsity: Option<SparsityAnalysis>,
    pub constants: ConstantEstimates,
    /// Firing rates of the evaluated models on the test splits (SNN only).
    pub rates: Option<RateReport>,
    pub global: ModelParams,
    pub clients: Vec<ModelParams>,
}

impl RegimeRun {
    pub fn final_accuracy(&self) -> f64 {
        self.rounds.last().map(|m| m.mean_accuracy).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasuredEnergy {
    pub regime: Regime,
    pub rates: RateReport,
    pub report: EnergyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergySummary {
    pub ops: Vec<LayerOps>,
    pub measured: Vec<MeasuredEnergy>,
    /// Priced from the configured reference rates; absent when their count
    /// does not fit the architecture.
    pub reference: Option<EnergyReport>,
}

pub struct ExperimentOutcome {
    pub runs: Vec<RegimeRun>,
    pub energy: EnergySummary,
}

struct Clock(Instant);

impl Clock {
    fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn emit(
    sink: &mut dyn MetricsSink,
    clock: &Clock,
    regime: Regime,
    round: usize,
    client: impl ToString,
    metric: &str,
    value: f64,
) -> Result<()> {
    sink.record(&MetricsRecord {
        regime,
        round,
        client: client.to_string(),
        metric: metric.into(),
        value,
        wall_clock: clock.secs(),
    })
}

/// Spike statistics of each client's evaluated model on its test split.
fn test_rates(fed: &Federation<'_>) -> Result<Option<RateReport>> {
    if fed.network.backbone() == Backbone::Ann {
        return Ok(None);
    }
    let mut total: Option<SpikeCounts> = None;
    for (k, part) in fed.dataset.clients.iter().enumerate() {
        let signals: Vec<&[f64]> = part.test.iter().map(|s| s.signal.as_slice()).collect();
        let counts = fed
            .network
            .predict(&fed.eval_params(k).values, &signals)?
            .spikes
            .ok_or_else(|| Error::Usage("SNN produced no spike counts".into()))?;
        match &mut total {
            Some(t) => t.merge(&counts),
            None => total = Some(counts),
        }
    }
    Ok(total.map(|t| RateReport {
        per_layer: t.rates(),
        aggregate: t.aggregate_rate(),
    }))
}

struct Diagnostics<'a> {
    cfg: &'a ExperimentConfig,
    pooled_train: Vec<Sample>,
    envelope_sets: Vec<&'a [Sample]>,
    drift: Vec<DriftReport>,
    envelope: Vec<EnvelopeReport>,
    snapshots: Vec<GradientSnapshot>,
}

impl<'a> Diagnostics<'a> {
    fn new(cfg: &'a ExperimentConfig, dataset: &'a Dataset) -> Self {
        let n = cfg.diagnostics.envelope_samples;
        Self {
            cfg,
            pooled_train: dataset.clients.iter().flat_map(|c| c.train.iter().cloned()).collect(),
            envelope_sets: dataset.clients.iter().map(|c| &c.train[..n.min(c.train.len())]).collect(),
            drift: Vec::new(),
            envelope: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    fn due(&self, round: usize) -> bool {
        let every = self.cfg.diagnostics.every;
        every > 0 && round % every == 0
    }

    fn observe(&mut self, fed: &Federation<'_>, round: usize, sink: &mut dyn MetricsSink, clock: &Clock) -> Result<()> {
        let regime = fed.regime;
        let w = &fed.server.global;
        let objectives = fed.objectives();
        let mut grads = Vec::with_capacity(objectives.len());
        let mut stochastic = Vec::with_capacity(objectives.len());
        for (k, obj) in objectives.iter().enumerate() {
            let (_, g) = obj.full_loss_grad(&w.values)?;
            let n = obj.num_samples();
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed ^ 0xD1A6, k, round));
            let batch = sample_indices(&mut rng, n, self.cfg.train.batch_size.min(n)).into_vec();
            let (_, gb) = obj.batch_loss_grad(&w.values, &batch)?;
            stochastic.push((gb, g.clone()));
            grads.push(g);
        }
        let rate = match fed.network.backbone() {
            Backbone::Snn => {
                Some(crate::energy::measure_rates(&fed.network, &w.values, &self.pooled_train)?.aggregate)
            }
            Backbone::Ann => None,
        };
        let report = drift_from_gradients(round, &fed.server.weights, &grads, rate)?;
        let mut full = vec![0.0; w.values.len()];
        for (g, p) in grads.iter().zip(&fed.server.weights) {
            full.iter_mut().zip(g).for_each(|(a, v)| *a += p * v);
        }
        self.snapshots.push(GradientSnapshot {
            params: w.values.clone(),
            full_grad: full,
            stochastic,
        });
        for (k, n) in report.client_grad_norms.iter().enumerate() {
            emit(sink, clock, regime, round, k, "grad_norm", *n)?;
        }
        emit(sink, clock, regime, round, "server", "drift", report.delta)?;
        emit(sink, clock, regime, round, "server", "drift_bound", report.bound_general)?;
        emit(sink, clock, regime, round, "server", "mean_grad_norm", report.mean_grad_norm)?;
        if let Some(r) = rate {
            emit(sink, clock, regime, round, "server", "mean_rate", r)?;
        }
        self.drift.push(report);

        let env_every = self.cfg.diagnostics.envelope_every;
        if env_every > 0 && round % env_every == 0 {
            let env_objs: Vec<NetworkObjective<'_>> = self
                .envelope_sets
                .iter()
                .map(|s| NetworkObjective {
                    network: &fed.network,
                    samples: s,
                })
                .collect();
            let dyn_objs: Vec<&dyn LocalObjective> = env_objs.iter().map(|o| o as &dyn LocalObjective).collect();
            let rep = envelope_grad_proxy(
                round,
                w,
                &dyn_objs,
                &fed.server.weights,
                self.cfg.train.mu,
                self.cfg.train.learning_rate,
                &self.cfg.diagnostics.envelope,
            )?;
            emit(sink, clock, regime, round, "server", "envelope_proxy", rep.proxy_norm)?;
            self.envelope.push(rep);
        }
        Ok(())
    }
}

/// Trains one regime from `init` and records its metrics and diagnostics.
pub fn run_regime(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    regime: Regime,
    init: &ModelParams,
    sink: &mut dyn MetricsSink,
) -> Result<RegimeRun> {
    run_regime_timed(cfg, dataset, regime, init, sink, &Clock(Instant::now()))
}

fn run_regime_timed(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    regime: Regime,
    init: &ModelParams,
    sink: &mut dyn MetricsSink,
    clock: &Clock,
) -> Result<RegimeRun> {
    let shape = crate::config::DataShape {
        channels: dataset.channels,
        length: dataset.length,
        num_classes: dataset.num_classes,
    };
    let network = Arc::new(Network::new(cfg.architecture(shape, regime.backbone()))?);
    let mut fed = Federation::new(network.clone(), dataset, regime, cfg.train.clone(), cfg.seed, init.clone())?;
    let mut diag = Diagnostics::new(cfg, dataset);
    if diag.due(0) {
        diag.observe(&fed, 0, sink, clock)?;
    }
    let mut rounds = Vec::with_capacity(cfg.train.rounds);
    for _ in 0..cfg.train.rounds {
        let m = fed.run_round()?;
        for (k, (loss, acc)) in m.train_loss.iter().zip(&m.test_accuracy).enumerate() {
            emit(sink, clock, regime, m.round, k, "train_loss", *loss)?;
            emit(sink, clock, regime, m.round, k, "test_accuracy", *acc)?;
        }
        emit(sink, clock, regime, m.round, "server", "mean_accuracy", m.mean_accuracy)?;
        if diag.due(m.round) {
            diag.observe(&fed, m.round, sink, clock)?;
        }
        rounds.push(m);
    }
    let sparsity = sparsity_analysis(&diag.drift, cfg.diagnostics.calibration_fraction)?;
    let eta = (regime.backbone() == Backbone::Snn).then_some(cfg.lif.surrogate_eta);
    let constants = estimate_constants(&diag.snapshots, &diag.drift, eta);
    let rates = test_rates(&fed)?;
    Ok(RegimeRun {
        regime,
        network,
        rounds,
        drift: diag.drift,
        envelope: diag.envelope,
        sparsity,
        constants,
        rates,
        global: fed.server.global.clone(),
        clients: fed.clients.iter().map(|c| c.params.clone()).collect(),
    })
}

/// Runs every configured regime on one dataset from one shared
/// initialization.
pub fn run_experiment(cfg: &ExperimentConfig, sink: &mut dyn MetricsSink) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let clock = Clock(Instant::now());
    let dataset = cfg.load_data()?;
    let shape = crate::config::DataShape {
        channels: dataset.channels,
        length: dataset.length,
        num_classes: dataset.num_classes,
    };
    // Both backbones share one layout, so one draw serves every regime.
    let init = Network::new(cfg.architecture(shape, Backbone::Snn))?.init_params(cfg.seed);
    let mut runs = Vec::with_capacity(cfg.regimes.len());
    for &regime in &cfg.regimes {
        runs.push(run_regime_timed(cfg, &dataset, regime, &init, sink, &clock)?);
    }

    let spec = cfg.architecture(shape, Backbone::Snn);
    let ops = count_ops(&spec)?;
    let constants = cfg.energy.constants();
    let options = cfg.energy.options();
    let mut measured = Vec::new();
    for run in &runs {
        if let Some(rates) = &run.rates {
            let report = estimate_energy(&ops, &rates.per_layer, cfg.lif.time_steps, &constants, options)?;
            measured.push(MeasuredEnergy {
                regime: run.regime,
                rates: rates.clone(),
                report,
            });
        }
    }
    let reference = estimate_energy(&ops, &cfg.energy.reference_rates, cfg.lif.time_steps, &constants, options).ok();
    Ok(ExperimentOutcome {
        runs,
        energy: EnergySummary {
            ops,
            measured,
            reference,
        },
    })
}

pub fn accuracy_csv(runs: &[RegimeRun]) -> String {
    let clients = runs.first().map(|r| r.clients.len()).unwrap_or(0);
    let mut out = String::from("regime,round,mean_accuracy");
    for k in 0..clients {
        let _ = write!(out, ",client_{k}");
    }
    out.push('\n');
    for run in runs {
        for m in &run.rounds {
            let _ = write!(out, "{},{},{}", run.regime, m.round, m.mean_accuracy);
            for a in &m.test_accuracy {
                let _ = write!(out, ",{a}");
            }
            out.push('\n');
        }
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn drift_csv(runs: &[RegimeRun]) -> String {
    let mut out = String::from(
        "regime,round,delta,g_hat,bound_general,bound_holds,jensen_holds,mean_grad_norm,mean_rate,\
         sparsity_bound,sparsity_holds,in_window,envelope_proxy\n",
    );
    for run in runs {
        for (i, d) in run.drift.iter().enumerate() {
            let row = run.sparsity.as_ref().map(|s| &s.rows[i]);
            let env = run.envelope.iter().find(|e| e.round == d.round).map(|e| e.proxy_norm);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                run.regime,
                d.round,
                d.delta,
                d.g_hat,
                d.bound_general,
                d.bound_holds,
                d.jensen_holds,
                d.mean_grad_norm,
                opt(d.mean_rate),
                opt(row.map(|r| r.bound)),
                row.map(|r| r.holds.to_string()).unwrap_or_default(),
                row.map(|r| r.in_window.to_string()).unwrap_or_default(),
                opt(env),
            );
        }
    }
    out
}

#[derive(Serialize)]
struct RegimeDiagnostics<'a> {
    regime: Regime,
    final_accuracy: f64,
    constants: &'a ConstantEstimates,
    c_hat: Option<f64>,
    calibration_window: Option<usize>,
    out_of_window_violations: Option<usize>,
    out_of_window_rate: Option<f64>,
    drift_bound_violations: usize,
    /// Envelope proxy minimum over the first and the second half of its
    /// evaluations.
    envelope_min_halves: Option<(f64, f64)>,
}

pub fn diagnostics_json(runs: &[RegimeRun]) -> Result<String> {
    let items: Vec<RegimeDiagnostics<'_>> = runs
        .iter()
        .map(|r| {
            let env: Vec<f64> = r.envelope.iter().map(|e| e.proxy_norm).collect();
            let half = env.len() / 2;
            let min = |s: &[f64]| s.iter().cloned().fold(f64::INFINITY, f64::min);
            RegimeDiagnostics {
                regime: r.regime,
                final_accuracy: r.final_accuracy(),
                constants: &r.constants,
                c_hat: r.sparsity.as_ref().map(|s| s.c_hat),
                calibration_window: r.sparsity.as_ref().map(|s| s.window),
                out_of_window_violations: r.sparsity.as_ref().map(|s| s.out_of_window_violations),
                out_of_window_rate: r.sparsity.as_ref().map(|s| s.out_of_window_rate),
                drift_bound_violations: r.drift.iter().filter(|d| !d.bound_holds).count(),
                envelope_min_halves: (half > 0).then(|| (min(&env[..half]), min(&env[half..]))),
            }
        })
        .collect();
    serde_json::to_string_pretty(&items).map_err(|e| Error::Argument(e.to_string()))
}

/// Writes `contents` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Paths of the artifacts written by [`run_to_dir`].
pub const ARTIFACTS: [&str; 6] = [
    "metrics.jsonl",
    "accuracy.csv",
    "drift.csv",
    "energy.json",
    "diagnostics.json",
    "config.resolved.toml",
];

/// Runs the experiment and writes every artifact into `cfg.output_dir`.
/// The metrics stream grows under a temporary name and is renamed last.
pub fn run_to_dir(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir.join("models"))?;
    let metrics_path = dir.join("metrics.jsonl");
    let metrics_tmp = tmp_path(&metrics_path);
    let mut sink = JsonlSink::new(BufWriter::new(fs::File::create(&metrics_tmp)?));
    let outcome = run_experiment(cfg, &mut sink)?;
    sink.into_inner().flush()?;

    write_atomic(&dir.join("config.resolved.toml"), cfg.to_toml()?.as_bytes())?;
    write_atomic(&dir.join("accuracy.csv"), accuracy_csv(&outcome.runs).as_bytes())?;
    write_atomic(&dir.join("drift.csv"), drift_csv(&outcome.runs).as_bytes())?;
    let energy = serde_json::to_string_pretty(&outcome.energy).map_err(|e| Error::Argument(e.to_string()))?;
    write_atomic(&dir.join("energy.json"), energy.as_bytes())?;
    write_atomic(&dir.join("diagnostics.json"), diagnostics_json(&outcome.runs)?.as_bytes())?;
    for run in &outcome.runs {
        let spec = run.network.spec().clone();
        let save = |params: &ModelParams, name: String| -> Result<()> {
            let saved = SavedModel {
                spec: spec.clone(),
                params: params.values.clone(),
            };
            let text = serde_json::to_string(&saved).map_err(|e| Error::Argument(e.to_string()))?;
            write_atomic(&dir.join("models").join(name), text.as_bytes())
        };
        save(&run.global, format!("{}-global.json", run.regime))?;
        if run.regime.personalized() {
            for (k, p) in run.clients.iter().enumerate() {
                save(p, format!("{}-client{k}.json", run.regime))?;
            }
        }
    }
    fs::rename(&metrics_tmp, &metrics_path)?;
    Ok(outcome)
}
