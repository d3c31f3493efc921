//! Dataset generation, CSV ingestion, normalization and poison-target
//! assignment.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

/// Which split a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labeled collection of (T x M) real sequences.
#[derive(Debug, Clone)]
pub struct TimeSeriesDataset {
    /// Row-major (N, T, M) values.
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    pub seq_len: usize,
    pub channels: usize,
    pub classes: usize,
    pub split: Split,
    /// Generator seed or source path, for reports.
    pub provenance: String,
}

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.seq_len * self.channels;
        &self.data[i * len..(i + 1) * len]
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Schema("dataset has no samples".into()));
        }
        let expect = self.len() * self.seq_len * self.channels;
        if self.data.len() != expect {
            return Err(Error::Schema(format!(
                "dataset holds {} values, expected {expect}",
                self.data.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Schema(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    /// New dataset keeping only the given sample indices.
    pub fn subset(&self, indices: &[usize], split: Split) -> TimeSeriesDataset {
        let len = self.seq_len * self.channels;
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        TimeSeriesDataset {
            data,
            labels,
            seq_len: self.seq_len,
            channels: self.channels,
            classes: self.classes,
            split,
            provenance: format!("{} (subset of {})", indices.len(), self.provenance),
        }
    }
}

/// Synthetic generator parameters. The defaults reproduce the desk-scale
/// pseudo-periodic set: three classes at base bands 3/7/12 with a weaker
/// first harmonic, random phases per sample and Gaussian noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seq_len: usize,
    pub channels: usize,
    pub classes: usize,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_train: 1200,
            n_test: 300,
            seq_len: 200,
            channels: 1,
            classes: 3,
            noise_std: 0.3,
        }
    }
}

const CLASS_BANDS: [f64; 3] = [3.0, 7.0, 12.0];

fn class_band(class: usize) -> f64 {
    // Classes beyond the canonical three continue the progression.
    if class < CLASS_BANDS.len() {
        CLASS_BANDS[class]
    } else {
        CLASS_BANDS[2] + 5.0 * (class - 2) as f64
    }
}

fn gen_split(cfg: &SyntheticConfig, seed: u64, split: Split) -> TimeSeriesDataset {
    let (n, label) = match split {
        Split::Train => (cfg.n_train, "train"),
        Split::Test => (cfg.n_test, "test"),
    };
    let mut rng = stream(seed, &format!("synthetic-{label}"));
    let noise = Normal::new(0.0, cfg.noise_std).unwrap();
    let two_pi = 2.0 * std::f64::consts::PI;
    let t = cfg.seq_len;

    let mut data = Vec::with_capacity(n * t * cfg.channels);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % cfg.classes;
        labels.push(class);
        let f = class_band(class);
        for _ in 0..cfg.channels {
            let phase: f64 = rng.gen::<f64>() * two_pi;
            let phase2: f64 = rng.gen::<f64>() * two_pi;
            for step in 0..t {
                let arg = two_pi * f * step as f64 / t as f64;
                let v = (arg + phase).sin() + 0.3 * (2.0 * arg + phase2).sin() + noise.sample(&mut rng);
                data.push(v);
            }
        }
    }
    // Generated channel-major per sample; interleave to (T, M) rows.
    let mut interleaved = vec![0.0; data.len()];
    for i in 0..n {
        for ch in 0..cfg.channels {
            for step in 0..t {
                interleaved[(i * t + step) * cfg.channels + ch] =
                    data[(i * cfg.channels + ch) * t + step];
            }
        }
    }
    TimeSeriesDataset {
        data: interleaved,
        labels,
        seq_len: t,
        channels: cfg.channels,
        classes: cfg.classes,
        split,
        provenance: format!("synthetic seed {seed}"),
    }
}

/// Generate the train/test splits from disjoint RNG streams.
pub fn gen_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    if cfg.n_train == 0 || cfg.n_test == 0 || cfg.seq_len == 0 || cfg.channels == 0 || cfg.classes == 0 {
        return Err(Error::contract("gen_synthetic: sizes must be positive"));
    }
    let train = gen_split(cfg, seed, Split::Train);
    let test = gen_split(cfg, seed, Split::Test);
    Ok((train, test))
}

/// Serialize to the interchange CSV format: one row per (sample, channel),
/// header `sample_id,channel,label,v0,...`.
pub fn to_csv(ds: &TimeSeriesDataset) -> String {
    let mut out = String::from("sample_id,channel,label");
    for step in 0..ds.seq_len {
        let _ = write!(out, ",v{step}");
    }
    out.push('\n');
    for i in 0..ds.len() {
        for ch in 0..ds.channels {
            let _ = write!(out, "{i},{ch},{}", ds.labels[i]);
            for step in 0..ds.seq_len {
                let _ = write!(out, ",{}", ds.data[(i * ds.seq_len + step) * ds.channels + ch]);
            }
            out.push('\n');
        }
    }
    out
}

pub fn save_csv(ds: &TimeSeriesDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(ds))?;
    Ok(())
}

/// Parse the interchange CSV format; validates rectangular shape,
/// consistent labels per sample and contiguous channel indices.
pub fn from_csv(text: &str, split: Split, provenance: &str) -> Result<TimeSeriesDataset> {
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema("empty file".into()))?
        .1;
    if !header.starts_with("sample_id,channel,label") {
        return Err(Error::Schema("missing sample_id,channel,label header".into()));
    }
    let seq_len = header.split(',').count() - 3;
    if seq_len == 0 {
        return Err(Error::Schema("no value columns".into()));
    }

    struct Row {
        sample: usize,
        channel: usize,
        label: usize,
        values: Vec<f64>,
    }
    let mut rows: Vec<Row> = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = i + 1;
        let mut parts = line.split(',');
        let mut field = |name: &str| -> Result<&str> {
            parts.next().ok_or(Error::Parse {
                line: line_no,
                message: format!("missing {name}"),
            })
        };
        let sample: usize = field("sample_id")?.parse().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("bad sample_id: {e}"),
        })?;
        let channel: usize = field("channel")?.parse().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("bad channel: {e}"),
        })?;
        let label: usize = field("label")?.parse().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("bad label: {e}"),
        })?;
        let values: Vec<f64> = parts
            .map(|s| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line: line_no,
                    message: format!("bad value: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != seq_len {
            return Err(Error::Schema(format!(
                "line {line_no}: {} values, expected {seq_len}",
                values.len()
            )));
        }
        rows.push(Row {
            sample,
            channel,
            label,
            values,
        });
    }
    if rows.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }

    let n = rows.iter().map(|r| r.sample).max().unwrap() + 1;
    let m = rows.iter().map(|r| r.channel).max().unwrap() + 1;
    if rows.len() != n * m {
        return Err(Error::Schema(format!(
            "{} rows for {n} samples x {m} channels",
            rows.len()
        )));
    }

    let mut data = vec![f64::NAN; n * seq_len * m];
    let mut labels = vec![usize::MAX; n];
    let mut seen = vec![false; n * m];
    for row in &rows {
        let slot = row.sample * m + row.channel;
        if seen[slot] {
            return Err(Error::Schema(format!(
                "duplicate row for sample {} channel {}",
                row.sample, row.channel
            )));
        }
        seen[slot] = true;
        if labels[row.sample] == usize::MAX {
            labels[row.sample] = row.label;
        } else if labels[row.sample] != row.label {
            return Err(Error::Schema(format!(
                "sample {} has conflicting labels",
                row.sample
            )));
        }
        for (step, &v) in row.values.iter().enumerate() {
            data[(row.sample * seq_len + step) * m + row.channel] = v;
        }
    }
    let classes = labels.iter().max().unwrap() + 1;
    let ds = TimeSeriesDataset {
        data,
        labels,
        seq_len,
        channels: m,
        classes,
        split,
        provenance: provenance.to_string(),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_csv(path: &Path, split: Split) -> Result<TimeSeriesDataset> {
    let text = std::fs::read_to_string(path)?;
    from_csv(&text, split, &path.display().to_string())
}

/// Per-channel normalization statistics fitted on a train split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fit z-score statistics on `ds` and return the normalized dataset.
/// Channels with zero spread are left unscaled (std clamped to 1).
pub fn zscore(ds: &TimeSeriesDataset) -> (TimeSeriesDataset, ChannelStats) {
    let m = ds.channels;
    let count = (ds.len() * ds.seq_len) as f64;
    let mut mean = vec![0.0; m];
    for row in ds.data.chunks_exact(m) {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= count;
    }
    let mut var = vec![0.0; m];
    for row in ds.data.chunks_exact(m) {
        for ch in 0..m {
            let d = row[ch] - mean[ch];
            var[ch] += d * d;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(ch, &v)| {
            let s = (v / count).sqrt();
            if s > 0.0 {
                s
            } else {
                log::warn!("zscore: channel {ch} has zero spread, leaving unscaled");
                1.0
            }
        })
        .collect();
    let stats = ChannelStats { mean, std };
    (apply_zscore(ds, &stats), stats)
}

/// Transform a dataset with previously fitted statistics (test splits use
/// the train statistics, never their own).
pub fn apply_zscore(ds: &TimeSeriesDataset, stats: &ChannelStats) -> TimeSeriesDataset {
    let m = ds.channels;
    let mut out = ds.clone();
    for row in out.data.chunks_exact_mut(m) {
        for ch in 0..m {
            row[ch] = (row[ch] - stats.mean[ch]) / stats.std[ch];
        }
    }
    out
}

/// Poison labeling mode: per-sample random non-true targets, or one shared
/// target class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    RandomLabel,
    SingleLabel { target: usize },
}

impl LabelMode {
    pub fn describe(&self) -> String {
        match self {
            LabelMode::RandomLabel => "random".to_string(),
            LabelMode::SingleLabel { target } => format!("single:{target}"),
        }
    }
}

/// Which train samples get poisoned and with which target labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonPlan {
    pub mode: LabelMode,
    /// Sorted, unique indices into the train split.
    pub indices: Vec<usize>,
    /// Target label per poisoned index, aligned with `indices`.
    pub targets: Vec<usize>,
    pub rate: f64,
    pub seed: u64,
}

/// Choose poisoned indices and their targets.
///
/// `rate` of the samples (rounded) are poisoned. In random-label mode every
/// target differs from the sample's ground truth.
pub fn assign_targets(
    labels: &[usize],
    classes: usize,
    mode: LabelMode,
    seed: u64,
    rate: f64,
) -> Result<PoisonPlan> {
    if classes < 2 {
        return Err(Error::contract("assign_targets: need at least 2 classes"));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::contract("assign_targets: rate must be in [0, 1]"));
    }
    if let LabelMode::SingleLabel { target } = mode {
        if target >= classes {
            return Err(Error::contract(format!(
                "assign_targets: target {target} out of range for {classes} classes"
            )));
        }
    }
    let n = labels.len();
    let count = (rate * n as f64).round() as usize;
    let mut rng = stream(seed, "poison-mask");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut indices: Vec<usize> = order.into_iter().take(count).collect();
    indices.sort_unstable();

    let mut target_rng = stream(seed, "poison-targets");
    let targets = indices
        .iter()
        .map(|&i| match mode {
            LabelMode::SingleLabel { target } => target,
            LabelMode::RandomLabel => {
                let offset = target_rng.gen_range(1..classes);
                (labels[i] + offset) % classes
            }
        })
        .collect();
    Ok(PoisonPlan {
        mode,
        indices,
        targets,
        rate,
        seed,
    })
}
