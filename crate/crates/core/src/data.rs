//! Per-client datasets: a synthetic generator of heterogeneous multichannel
//! signals and the `SFED` binary container.
//!
//! # Container layout
//!
//! All integers and floats are little-endian.
//!
//! | field                 | type            |
//! |-----------------------|-----------------|
//! | magic                 | `b"SFED"`       |
//! | version               | `u16` (= 1)     |
//! | num_clients           | `u32`           |
//! | per-client counts     | `u32` × clients |
//! | channels `C`          | `u32`           |
//! | length `L`            | `u32`           |
//! | num_classes           | `u16`           |
//! | records, client order | label `u16`, then `C·L` × `f32` (channel-major) |

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SFED";
pub const VERSION: u16 = 1;

/// One windowed recording: `C×L` values, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub signal: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientPartition {
    pub client_id: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ClientPartition {
    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut hist = vec![0; num_classes];
        for s in self.train.iter().chain(&self.test) {
            hist[s.label] += 1;
        }
        hist
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A full federated dataset: partitions plus their shared geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub length: usize,
    pub num_classes: usize,
    pub clients: Vec<ClientPartition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_clients: usize,
    pub train_per_client: usize,
    pub test_per_client: usize,
    pub channels: usize,
    pub length: usize,
    pub num_classes: usize,
    /// Client heterogeneity θ in [0, 1]; 0 gives IID clients.
    pub heterogeneity: f64,
    pub snr_db: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_clients: 3,
            train_per_client: 480,
            test_per_client: 120,
            channels: 8,
            length: 128,
            num_classes: 4,
            heterogeneity: 0.6,
            snr_db: 10.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data.num_clients", self.num_clients),
            ("data.train_per_client", self.train_per_client),
            ("data.channels", self.channels),
            ("data.length", self.length),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return Err(Error::config("data.num_classes", "must be in [2, 65535]"));
        }
        if self.num_classes > self.channels {
            return Err(Error::config(
                "data.num_classes",
                "must not exceed data.channels (classes are channel rotations of one montage)",
            ));
        }
        if self.test_per_client < self.num_classes {
            return Err(Error::config(
                "data.test_per_client",
                "must be at least num_classes so every class is tested",
            ));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::config("data.heterogeneity", "must lie in [0, 1]"));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::config("data.snr_db", "must be finite"));
        }
        Ok(())
    }
}

/// Generated dataset plus the ground-truth per-client distortion.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: Dataset,
    /// Per-client `C×C` channel mixing, row-major.
    pub mixing: Vec<Vec<f64>>,
    /// Per-client channel gains.
    pub gains: Vec<Vec<f64>>,
}

/// Per-channel oscillation parameters of the base montage.
struct Montage {
    freq: Vec<f64>,
    phase: Vec<f64>,
    amp: Vec<f64>,
}

/// `C×C` matrix of the cyclic channel shift `(P x)_i = x_{(i+d) mod C}`.
fn cyclic_shift(c: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; c * c];
    for i in 0..c {
        m[i * c + (i + d) % c] = 1.0;
    }
    m
}

/// Spread of the per-sample mixing strength around its client mean.
const SESSION_SPREAD: f64 = 0.4;

/// Generates `num_clients` partitions.
///
/// Classes share one base montage of per-channel oscillations (random
/// frequency, phase, amplitude); class `c` is the montage rotated by `c`
/// channels. Client `k` sees each sample through `(1−s)·I + s·R_k`, where
/// `R_k` is a client-specific channel rotation and the strength
/// `s = θ·b` varies per sample with `b ~ clamp(N(½, σ), 0, 1)`. Clients come
/// in mirrored pairs (`R` and `R⁻¹`), so as θ grows a paired client's class
/// `c` drifts toward the other's class `c + d`. Channels are then rescaled by `1 + θ·u_k`,
/// `u_k ∈ [−½, ½]`, and white noise is added at the configured SNR. Each
/// client is normalized with its own train statistics and values are
/// rounded to `f32` so the dataset survives the container intact.
///
/// The returned mixing matrices use the mean strength `θ/2`.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let (c, l, theta) = (cfg.channels, cfg.length, cfg.heterogeneity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let montage = Montage {
        freq: (0..c).map(|_| rng.gen_range(2.0..12.0)).collect(),
        phase: (0..c).map(|_| rng.gen_range(0.0..2.0 * PI)).collect(),
        amp: (0..c).map(|_| rng.gen_range(0.3..1.5)).collect(),
    };

    // The half-turn is its own mirror and would pair a client with itself.
    let mut base: Vec<usize> = (1..c).filter(|&d| 2 * d < c).collect();
    base.shuffle(&mut rng);
    let shifts: Vec<usize> = base.iter().flat_map(|&d| [d, c - d]).collect();
    let mut mixing = Vec::with_capacity(cfg.num_clients);
    let mut gains = Vec::with_capacity(cfg.num_clients);
    let mut client_shift = Vec::with_capacity(cfg.num_clients);
    for k in 0..cfg.num_clients {
        let shift = if shifts.is_empty() { 0 } else { shifts[k % shifts.len()] };
        let rot = cyclic_shift(c, shift);
        let u: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mean = theta / 2.0;
        let m: Vec<f64> = (0..c * c)
            .map(|idx| {
                let id = if idx / c == idx % c { 1.0 } else { 0.0 };
                (1.0 - mean) * id + mean * rot[idx]
            })
            .collect();
        mixing.push(m);
        gains.push(u.iter().map(|v| 1.0 + theta * v).collect::<Vec<f64>>());
        client_shift.push(shift);
    }

    let noise_ratio = 10f64.powf(-cfg.snr_db / 10.0);
    let mut clients = Vec::with_capacity(cfg.num_clients);
    for k in 0..cfg.num_clients {
        let mut client_rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(k as u64 + 1)));
        let mut make = |n: usize| -> Vec<Sample> {
            let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.num_classes).collect();
            labels.shuffle(&mut client_rng);
            labels
                .into_iter()
                .map(|label| {
                    let gain = 1.0 + 0.15 * client_rng.sample::<f64, _>(StandardNormal);
                    let shift = 0.4 * client_rng.sample::<f64, _>(StandardNormal);
                    let mut clean = vec![0.0; c * l];
                    for j in 0..c {
                        let src = (j + label) % c;
                        for t in 0..l {
                            let arg = 2.0 * PI * montage.freq[src] * t as f64 / l as f64 + montage.phase[src] + shift;
                            clean[j * l + t] = gain * montage.amp[src] * arg.sin();
                        }
                    }
                    let b = (0.5 + SESSION_SPREAD * client_rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
                    let strength = theta * b;
                    let d = client_shift[k];
                    let mut mixed = vec![0.0; c * l];
                    for i in 0..c {
                        let j = (i + d) % c;
                        for t in 0..l {
                            let v = (1.0 - strength) * clean[i * l + t] + strength * clean[j * l + t];
                            mixed[i * l + t] = gains[k][i] * v;
                        }
                    }
                    let power = mixed.iter().map(|v| v * v).sum::<f64>() / mixed.len() as f64;
                    let sigma = (power * noise_ratio).sqrt();
                    for v in &mut mixed {
                        *v += sigma * client_rng.sample::<f64, _>(StandardNormal);
                    }
                    Sample { signal: mixed, label }
                })
                .collect()
        };
        let mut train = make(cfg.train_per_client);
        let mut test = make(cfg.test_per_client);
        normalize_with_train_stats(&mut train, &mut test, c, l);
        for s in train.iter_mut().chain(test.iter_mut()) {
            for v in &mut s.signal {
                *v = *v as f32 as f64;
            }
        }
        clients.push(ClientPartition {
            client_id: k,
            train,
            test,
        });
    }
    Ok(SynthDataset {
        dataset: Dataset {
            channels: c,
            length: l,
            num_classes: cfg.num_classes,
            clients,
        },
        mixing,
        gains,
    })
}

/// Per-channel z-scoring with statistics taken from `train` only.
pub fn normalize_with_train_stats(train: &mut [Sample], test: &mut [Sample], channels: usize, length: usize) {
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    let count = (train.len() * length) as f64;
    if count == 0.0 {
        return;
    }
    for s in train.iter() {
        for j in 0..channels {
            mean[j] += s.signal[j * length..(j + 1) * length].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for s in train.iter() {
        for j in 0..channels {
            var[j] += s.signal[j * length..(j + 1) * length]
                .iter()
                .map(|v| (v - mean[j]) * (v - mean[j]))
                .sum::<f64>();
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / count).sqrt();
            if s > 0.0 { s } else { 1.0 }
        })
        .collect();
    for s in train.iter_mut().chain(test.iter_mut()) {
        for j in 0..channels {
            for v in &mut s.signal[j * length..(j + 1) * length] {
                *v = (*v - mean[j]) / std[j];
            }
        }
    }
}

/// Serializes per-client sample lists into the container format.
pub fn encode_container(
    channels: usize,
    length: usize,
    num_classes: usize,
    clients: &[Vec<Sample>],
) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} exceeds u32")))
    };
    let classes = u16::try_from(num_classes)
        .map_err(|_| Error::Argument(format!("{num_classes} classes exceed u16")))?;
    let record = 2 + 4 * channels * length;
    let total: usize = clients.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(4 + 2 + 4 + 4 * clients.len() + 10 + total * record);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(clients.len(), "client count")?.to_le_bytes());
    for c in clients {
        out.extend_from_slice(&to_u32(c.len(), "sample count")?.to_le_bytes());
    }
    out.extend_from_slice(&to_u32(channels, "channel count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(length, "length")?.to_le_bytes());
    out.extend_from_slice(&classes.to_le_bytes());
    for s in clients.iter().flatten() {
        if s.signal.len() != channels * length {
            return Err(Error::dim("sample size does not match container geometry"));
        }
        if s.label >= num_classes {
            return Err(Error::Argument(format!("label {} out of range", s.label)));
        }
        out.extend_from_slice(&(s.label as u16).to_le_bytes());
        for &v in &s.signal {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes the train split followed by the test split of every client.
pub fn export_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let clients: Vec<Vec<Sample>> = dataset
        .clients
        .iter()
        .map(|p| p.train.iter().chain(&p.test).cloned().collect())
        .collect();
    let bytes = encode_container(dataset.channels, dataset.length, dataset.num_classes, &clients)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Raw contents of a container.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub channels: usize,
    pub length: usize,
    pub num_classes: usize,
    pub clients: Vec<Vec<Sample>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Ingest {
                offset: self.pos as u64,
                message: format!("truncated {what}: expected {n} bytes, {available} available"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Ingest {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"SFED\""),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Ingest {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let num_clients = r.u32("client count")? as usize;
    let mut counts = Vec::with_capacity(num_clients.min(1 << 16));
    for _ in 0..num_clients {
        counts.push(r.u32("sample count")? as usize);
    }
    let channels = r.u32("channel count")? as usize;
    let length = r.u32("length")? as usize;
    let geometry_at = r.pos - 8;
    let num_classes = r.u16("class count")? as usize;
    if channels == 0 || length == 0 {
        return Err(Error::Ingest {
            offset: geometry_at as u64,
            message: "zero channels or length".into(),
        });
    }
    if num_classes < 2 {
        return Err(Error::Ingest {
            offset: (geometry_at + 8) as u64,
            message: format!("{num_classes} classes"),
        });
    }
    let values = channels * length;
    let record = 2 + 4 * values;
    let needed: usize = counts.iter().sum::<usize>() * record;
    let available = bytes.len() - r.pos;
    if available < needed {
        return Err(Error::Ingest {
            offset: r.pos as u64,
            message: format!("truncated records: expected {needed} bytes, {available} available"),
        });
    }
    let mut clients = Vec::with_capacity(num_clients);
    let mut index = 0usize;
    for &n in &counts {
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.pos;
            let label = r.u16("label")? as usize;
            if label >= num_classes {
                return Err(Error::Ingest {
                    offset: at as u64,
                    message: format!("record {index}: label {label} outside [0, {num_classes})"),
                });
            }
            let raw = r.take(4 * values, "signal")?;
            let signal = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            samples.push(Sample { signal, label });
            index += 1;
        }
        clients.push(samples);
    }
    if r.pos != bytes.len() {
        return Err(Error::Ingest {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Container {
        channels,
        length,
        num_classes,
        clients,
    })
}

pub fn read_container(path: &Path) -> Result<Container> {
    decode_container(&std::fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Fraction of each client's records held out for testing.
    pub test_fraction: f64,
    /// Seed for the per-client shuffle; `None` keeps file order.
    pub shuffle_seed: Option<u64>,
    pub normalize: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            shuffle_seed: Some(0),
            normalize: true,
        }
    }
}

/// Loads a container and splits every client into train and test. The split
/// is stratified: the last `⌈n_c·test_fraction⌉` records of each class
/// (after the optional shuffle) go to test. Normalization uses train
/// statistics only.
pub fn ingest(path: &Path, cfg: &IngestConfig) -> Result<Dataset> {
    let container = read_container(path)?;
    split_container(container, cfg)
}

pub fn split_container(container: Container, cfg: &IngestConfig) -> Result<Dataset> {
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
    }
    let (channels, length, num_classes) = (container.channels, container.length, container.num_classes);
    let mut clients = Vec::with_capacity(container.clients.len());
    for (k, mut samples) in container.clients.into_iter().enumerate() {
        if let Some(seed) = cfg.shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            samples.shuffle(&mut rng);
        }
        let mut per_class = vec![0usize; num_classes];
        samples.iter().for_each(|s| per_class[s.label] += 1);
        if let Some(c) = per_class.iter().position(|&n| n < 2) {
            return Err(Error::config(
                "data.test_fraction",
                format!("client {k} has {} records of class {c}, need at least 2", per_class[c]),
            ));
        }
        let mut quota: Vec<usize> = per_class
            .iter()
            .map(|&n| (((n as f64) * cfg.test_fraction).ceil() as usize).clamp(1, n - 1))
            .collect();
        let mut is_test = vec![false; samples.len()];
        for (i, s) in samples.iter().enumerate().rev() {
            if quota[s.label] > 0 {
                quota[s.label] -= 1;
                is_test[i] = true;
            }
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (s, t) in samples.into_iter().zip(is_test) {
            if t { test.push(s) } else { train.push(s) }
        }
        if cfg.normalize {
            normalize_with_train_stats(&mut train, &mut test, channels, length);
        }
        clients.push(ClientPartition {
            client_id: k,
            train,
            test,
        });
    }
    Ok(Dataset {
        channels,
        length,
        num_classes,
        clients,
    })
}
