//! Time-series classifier zoo: BiRNN, LSTM, CNN and TCN behind one
//! train/predict surface.

mod conv;
mod recurrent;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, TensorId};
use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerRule, ParameterSet};
use crate::rng::{fingerprint_f64, stream};
use crate::spectral::SensitivityModel;

/// Supported architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    BiRnn,
    Lstm,
    Cnn,
    Tcn,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::BiRnn, Arch::Lstm, Arch::Cnn, Arch::Tcn];

    pub fn name(&self) -> &'static str {
        match self {
            Arch::BiRnn => "bi_rnn",
            Arch::Lstm => "lstm",
            Arch::Cnn => "cnn",
            Arch::Tcn => "tcn",
        }
    }

    /// Default optimizer rule for this family: Adam for the conv models,
    /// RMSProp for the recurrent ones.
    pub fn default_optimizer(&self) -> OptimizerRule {
        match self {
            Arch::BiRnn | Arch::Lstm => OptimizerRule::rmsprop_default(),
            Arch::Cnn | Arch::Tcn => OptimizerRule::adam_default(),
        }
    }
}

/// Architecture plus sizes; fully determines the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub seq_len: usize,
    pub channels: usize,
    pub classes: usize,
    /// Hidden width for the recurrent models, channel count for the conv ones.
    pub hidden: usize,
    /// Conv layer count (CNN). TCN block count follows `dilations`.
    pub layers: usize,
    pub kernel: usize,
    /// TCN dilation schedule, strictly increasing.
    pub dilations: Vec<usize>,
    pub seed: u64,
}

impl ModelSpec {
    /// Spec with the default widths for `arch`.
    pub fn new(arch: Arch, seq_len: usize, channels: usize, classes: usize, seed: u64) -> Self {
        let mut spec = ModelSpec {
            arch,
            seq_len,
            channels,
            classes,
            hidden: 64,
            layers: 1,
            kernel: 0,
            dilations: Vec::new(),
            seed,
        };
        match arch {
            Arch::BiRnn | Arch::Lstm => {}
            Arch::Cnn => {
                spec.hidden = 48;
                spec.layers = 3;
                spec.kernel = 7;
            }
            Arch::Tcn => {
                spec.hidden = 48;
                spec.layers = 3;
                spec.kernel = 3;
                spec.dilations = vec![1, 2, 4];
            }
        }
        spec
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let field = |field, message: String| Error::Validation { field, message };
        if self.classes < 2 {
            return Err(field("classes", format!("need >= 2, got {}", self.classes)));
        }
        if self.hidden == 0 {
            return Err(field("hidden", "must be positive".into()));
        }
        if self.seq_len == 0 || self.channels == 0 {
            return Err(field("seq_len", "input shape must be positive".into()));
        }
        match self.arch {
            Arch::Cnn => {
                if self.kernel == 0 {
                    return Err(field("kernel", "must be positive".into()));
                }
                if self.layers == 0 {
                    return Err(field("layers", "must be positive".into()));
                }
            }
            Arch::Tcn => {
                if self.kernel == 0 {
                    return Err(field("kernel", "must be positive".into()));
                }
                if self.dilations.is_empty() {
                    return Err(field("dilations", "must not be empty".into()));
                }
                if !self.dilations.windows(2).all(|w| w[0] < w[1]) {
                    return Err(field(
                        "dilations",
                        format!("must be strictly increasing, got {:?}", self.dilations),
                    ));
                }
            }
            Arch::BiRnn | Arch::Lstm => {}
        }
        Ok(())
    }

    /// Receptive field of the TCN stack in steps: 1 + (k-1) * sum(dilations).
    pub fn receptive_field(&self) -> usize {
        match self.arch {
            Arch::Tcn => 1 + (self.kernel - 1) * self.dilations.iter().sum::<usize>(),
            Arch::Cnn => 1 + self.layers * (self.kernel - 1),
            Arch::BiRnn | Arch::Lstm => self.seq_len,
        }
    }
}

/// Training progress captured alongside a model.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs_run: usize,
    pub best_loss: f64,
    pub loss_curve: Vec<f64>,
}

/// A built (possibly trained) classifier.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    pub meta: TrainMeta,
}

pub(crate) type Bindings = Vec<(String, TensorId)>;

/// Build a classifier with parameters initialized uniformly at
/// +-1/sqrt(fan_in), deterministically from the spec seed.
pub fn build(spec: &ModelSpec) -> Result<Classifier> {
    spec.validate()?;
    let mut rng = stream(spec.seed, "model-init");
    let mut params = ParameterSet::new();
    let mut add_weight = |params: &mut ParameterSet, name: &str, shape: &[usize], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let count: usize = shape.iter().product();
        let values: Vec<f64> = (0..count).map(|_| rng.gen_range(-bound..bound)).collect();
        params.insert(name, shape, values)
    };

    let (m, c, h) = (spec.channels, spec.classes, spec.hidden);
    match spec.arch {
        Arch::BiRnn => {
            for dir in ["fwd", "bwd"] {
                add_weight(&mut params, &format!("{dir}.w_ih"), &[m, h], m)?;
                add_weight(&mut params, &format!("{dir}.w_hh"), &[h, h], h)?;
                params.insert(&format!("{dir}.b"), &[h], vec![0.0; h])?;
            }
            add_weight(&mut params, "head.w", &[2 * h, c], 2 * h)?;
            params.insert("head.b", &[c], vec![0.0; c])?;
        }
        Arch::Lstm => {
            add_weight(&mut params, "lstm.w_ih", &[m, 4 * h], m)?;
            add_weight(&mut params, "lstm.w_hh", &[h, 4 * h], h)?;
            // Forget-gate bias starts at 1 so early gradients flow.
            let mut b = vec![0.0; 4 * h];
            for v in b.iter_mut().take(2 * h).skip(h) {
                *v = 1.0;
            }
            params.insert("lstm.b", &[4 * h], b)?;
            add_weight(&mut params, "head.w", &[h, c], h)?;
            params.insert("head.b", &[c], vec![0.0; c])?;
        }
        Arch::Cnn => {
            let mut c_in = m;
            for layer in 0..spec.layers {
                add_weight(
                    &mut params,
                    &format!("conv{layer}.w"),
                    &[h, spec.kernel, c_in],
                    spec.kernel * c_in,
                )?;
                params.insert(&format!("conv{layer}.b"), &[h], vec![0.0; h])?;
                c_in = h;
            }
            add_weight(&mut params, "head.w", &[h, c], h)?;
            params.insert("head.b", &[c], vec![0.0; c])?;
        }
        Arch::Tcn => {
            let mut c_in = m;
            for (block, _) in spec.dilations.iter().enumerate() {
                add_weight(
                    &mut params,
                    &format!("block{block}.w"),
                    &[h, spec.kernel, c_in],
                    spec.kernel * c_in,
                )?;
                params.insert(&format!("block{block}.b"), &[h], vec![0.0; h])?;
                if c_in != h {
                    add_weight(&mut params, &format!("block{block}.proj.w"), &[h, 1, c_in], c_in)?;
                }
                c_in = h;
            }
            add_weight(&mut params, "head.w", &[h, c], h)?;
            params.insert("head.b", &[c], vec![0.0; c])?;
        }
    }
    Ok(Classifier {
        spec: spec.clone(),
        params,
        meta: TrainMeta::default(),
    })
}

impl Classifier {
    /// Build the forward graph for a batch already on the tape as an
    /// (N, T, M) leaf. Returns the (N, C) logits and the parameter bindings.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        x: TensorId,
        trainable: bool,
    ) -> Result<(TensorId, Bindings)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.spec.seq_len || shape[2] != self.spec.channels {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: shape,
                right: vec![self.spec.seq_len, self.spec.channels],
            });
        }
        match self.spec.arch {
            Arch::BiRnn => recurrent::birnn_graph(self, tape, x, trainable),
            Arch::Lstm => recurrent::lstm_graph(self, tape, x, trainable),
            Arch::Cnn => conv::cnn_graph(self, tape, x, trainable),
            Arch::Tcn => conv::tcn_graph(self, tape, x, trainable),
        }
    }

    /// Logits for a flat (n, T, M) batch, without recording gradients.
    pub fn predict(&self, batch: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.leaf(
            batch.to_vec(),
            &[n, self.spec.seq_len, self.spec.channels],
            false,
        )?;
        let (logits, _) = self.forward_graph(&mut tape, x, false)?;
        Ok(tape.values(logits).to_vec())
    }

    /// Predicted class per sample of a dataset.
    pub fn predict_labels(&self, ds: &TimeSeriesDataset) -> Result<Vec<usize>> {
        let sample_len = ds.seq_len * ds.channels;
        let mut out = Vec::with_capacity(ds.len());
        for start in (0..ds.len()).step_by(128) {
            let n = 128.min(ds.len() - start);
            let logits = self.predict(&ds.data[start * sample_len..(start + n) * sample_len], n)?;
            out.extend(kernels::argmax_rows(&logits, n, self.spec.classes));
        }
        Ok(out)
    }

    /// Fraction of a dataset classified correctly.
    pub fn accuracy(&self, ds: &TimeSeriesDataset) -> Result<f64> {
        let predicted = self.predict_labels(ds)?;
        let hits = predicted
            .iter()
            .zip(&ds.labels)
            .filter(|(p, y)| p == y)
            .count();
        Ok(hits as f64 / ds.len() as f64)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_f64(&self.params.flat_values())
    }
}

impl SensitivityModel for Classifier {
    fn input_len(&self) -> usize {
        self.spec.seq_len
    }

    fn input_channels(&self) -> usize {
        self.spec.channels
    }

    fn model_fingerprint(&self) -> String {
        self.fingerprint()
    }

    fn batch_losses(&self, batch: &[f64], n: usize, labels: &[usize]) -> Result<Vec<f64>> {
        let logits = self.predict(batch, n)?;
        Ok(kernels::ce_losses(&logits, labels, self.spec.classes))
    }
}

/// Early-stopping rule: stop when the epoch loss has not improved by more
/// than `min_delta` for `epochs` consecutive epochs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Patience {
    pub min_delta: f64,
    pub epochs: usize,
}

impl Default for Patience {
    fn default() -> Self {
        Patience {
            min_delta: 1e-4,
            epochs: 10,
        }
    }
}

/// Training-loop configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerRule,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub patience: Option<Patience>,
}

impl TrainConfig {
    /// Defaults for an architecture: its family optimizer, at most 100
    /// epochs, batches of 32 and the standard patience rule.
    pub fn for_arch(arch: Arch, seed: u64) -> Self {
        TrainConfig {
            optimizer: arch.default_optimizer(),
            max_epochs: 100,
            batch_size: 32,
            seed,
            patience: Some(Patience::default()),
        }
    }

    pub fn with_epochs(mut self, max_epochs: usize) -> Self {
        self.max_epochs = max_epochs;
        self
    }

    pub fn without_patience(mut self) -> Self {
        self.patience = None;
        self
    }
}

/// Minimize cross entropy over shuffled minibatches; keeps the snapshot
/// with the best epoch loss. NaN loss aborts with the epoch index.
pub fn train(model: &mut Classifier, ds: &TimeSeriesDataset, cfg: &TrainConfig) -> Result<TrainMeta> {
    if ds.is_empty() {
        return Err(Error::contract("train: empty dataset"));
    }
    if let Some(&bad) = ds.labels.iter().find(|&&l| l >= model.spec.classes) {
        return Err(Error::contract(format!(
            "train: label {bad} out of range for {} classes",
            model.spec.classes
        )));
    }
    let mut meta = TrainMeta::default();
    if cfg.max_epochs == 0 {
        model.meta = meta.clone();
        return Ok(meta);
    }

    let sample_len = ds.seq_len * ds.channels;
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut shuffle_rng = stream(cfg.seed, "train-shuffle");
    let mut order: Vec<usize> = (0..ds.len()).collect();

    let mut best_loss = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut stale_epochs = 0usize;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            let mut batch = Vec::with_capacity(n * sample_len);
            let mut labels = Vec::with_capacity(n);
            for &i in chunk {
                batch.extend_from_slice(ds.sample(i));
                labels.push(ds.labels[i]);
            }
            let mut tape = Tape::new();
            let x = tape.leaf(batch, &[n, ds.seq_len, ds.channels], false)?;
            let (logits, bindings) = model.forward_graph(&mut tape, x, true)?;
            let loss = tape.cross_entropy_mean(logits, &labels)?;
            let loss_value = tape.values(loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::Training { epoch });
            }
            epoch_loss += loss_value;
            batches += 1;
            let mut grads = tape.backward(loss)?;
            for (name, id) in &bindings {
                if let Some(g) = grads.take(*id) {
                    model.params.accumulate_grad(name, &g)?;
                }
            }
            optimizer.step(&mut model.params)?;
        }
        epoch_loss /= batches as f64;
        meta.loss_curve.push(epoch_loss);
        meta.epochs_run = epoch + 1;

        let improved = epoch_loss < best_loss - cfg.patience.map_or(0.0, |p| p.min_delta);
        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            best_params = model.params.clone();
        }
        if let Some(p) = cfg.patience {
            if improved {
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= p.epochs {
                    break;
                }
            }
        }
    }
    model.params = best_params;
    meta.best_loss = best_loss;
    model.meta = meta.clone();
    Ok(meta)
}

/// Self-describing checkpoint: spec block plus named flat parameter arrays.
/// JSON numbers round-trip f64 bit-exactly.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    spec: ModelSpec,
    meta: TrainMeta,
    shapes: BTreeMap<String, Vec<usize>>,
    params: BTreeMap<String, Vec<f64>>,
}

pub fn save_checkpoint(model: &Classifier, path: &Path) -> Result<()> {
    let mut shapes = BTreeMap::new();
    let mut params = BTreeMap::new();
    for (name, p) in model.params.iter() {
        shapes.insert(name.clone(), p.shape.clone());
        params.insert(name.clone(), p.values.as_ref().clone());
    }
    let ckpt = Checkpoint {
        spec: model.spec.clone(),
        meta: model.meta.clone(),
        shapes,
        params,
    };
    std::fs::write(path, serde_json::to_vec_pretty(&ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    let bytes = std::fs::read(path)?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
    let mut params = ParameterSet::new();
    for (name, values) in ckpt.params {
        let shape = ckpt
            .shapes
            .get(&name)
            .ok_or_else(|| Error::Schema(format!("checkpoint missing shape for `{name}`")))?;
        params.insert(&name, shape, values)?;
    }
    let model = Classifier {
        spec: ckpt.spec,
        params,
        meta: ckpt.meta,
    };
    // Reject checkpoints whose parameter layout does not match the spec.
    let expect = build(&model.spec)?;
    let names_match = expect
        .params
        .names()
        .zip(model.params.names())
        .all(|(a, b)| a == b)
        && expect.params.names().count() == model.params.names().count();
    if !names_match {
        return Err(Error::Schema("checkpoint parameters do not match spec".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Split, SyntheticConfig};

    fn tiny_dataset(n: usize, t: usize, classes: usize, seed: u64) -> TimeSeriesDataset {
        let mut rng = stream(seed, "tiny-ds");
        let data: Vec<f64> = (0..n * t).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        TimeSeriesDataset {
            data,
            labels,
            seq_len: t,
            channels: 1,
            classes,
            split: Split::Train,
            provenance: "tiny".into(),
        }
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ModelSpec::new(Arch::Lstm, 10, 1, 3, 42).with_hidden(8);
        let a = build(&spec).unwrap();
        let b = build(&spec).unwrap();
        assert_eq!(a.params.flat_values(), b.params.flat_values());
    }

    #[test]
    fn birnn_head_shape_is_double_hidden() {
        let spec = ModelSpec::new(Arch::BiRnn, 10, 1, 3, 0).with_hidden(16);
        let model = build(&spec).unwrap();
        assert_eq!(model.params.get("head.w").unwrap().shape, vec![32, 3]);
    }

    #[test]
    fn tcn_receptive_field_recurrence() {
        let spec = ModelSpec::new(Arch::Tcn, 50, 1, 2, 0);
        // kernel 3, dilations (1,2,4): 1 + 2*(1+2+4) = 15.
        assert_eq!(spec.receptive_field(), 15);
    }

    #[test]
    fn invalid_spec_names_field() {
        let mut spec = ModelSpec::new(Arch::Tcn, 50, 1, 2, 0);
        spec.dilations = vec![1, 4, 2];
        match build(&spec) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "dilations"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn empty_batch_gives_empty_logits() {
        for arch in Arch::ALL {
            let spec = ModelSpec::new(arch, 12, 1, 3, 1).with_hidden(4);
            let model = build(&spec).unwrap();
            let logits = model.predict(&[], 0).unwrap();
            assert!(logits.is_empty(), "{arch:?}");
        }
    }

    #[test]
    fn softmax_of_logits_sums_to_one() {
        for arch in Arch::ALL {
            let spec = ModelSpec::new(arch, 12, 2, 3, 7).with_hidden(6);
            let model = build(&spec).unwrap();
            let mut rng = stream(3, "probe");
            let batch: Vec<f64> = (0..2 * 12 * 2).map(|_| rng.gen::<f64>()).collect();
            let logits = model.predict(&batch, 2).unwrap();
            let probs = kernels::softmax_rows(&logits, 2, 3);
            for row in probs.chunks(3) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn untrained_accuracy_near_chance_on_random_data() {
        let ds = tiny_dataset(300, 16, 3, 5);
        let spec = ModelSpec::new(Arch::Cnn, 16, 1, 3, 2).with_hidden(8);
        let model = build(&spec).unwrap();
        let acc = model.accuracy(&ds).unwrap();
        // Labels are independent of inputs, so P(correct) = 1/3;
        // 3 sigma for n=300 is about 0.082.
        assert!((acc - 1.0 / 3.0).abs() < 0.082, "acc {acc}");
    }

    #[test]
    fn zero_epochs_leaves_parameters_unchanged() {
        let ds = tiny_dataset(8, 8, 2, 1);
        let spec = ModelSpec::new(Arch::Lstm, 8, 1, 2, 3).with_hidden(4);
        let mut model = build(&spec).unwrap();
        let before = model.params.flat_values();
        let cfg = TrainConfig::for_arch(Arch::Lstm, 0).with_epochs(0);
        train(&mut model, &ds, &cfg).unwrap();
        assert_eq!(model.params.flat_values(), before);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset(24, 10, 2, 8);
        let spec = ModelSpec::new(Arch::Cnn, 10, 1, 2, 4).with_hidden(6);
        let run = || {
            let mut model = build(&spec).unwrap();
            let cfg = TrainConfig::for_arch(Arch::Cnn, 9).with_epochs(3);
            train(&mut model, &ds, &cfg).unwrap();
            model.params.flat_values()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_arch_fits_a_separable_toy_problem() {
        // Two classes split by sign of the mean, T=8.
        let n = 40;
        let t = 8;
        let mut rng = stream(17, "separable");
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let offset = if class == 0 { -1.0 } else { 1.0 };
            for _ in 0..t {
                data.push(offset + 0.1 * (rng.gen::<f64>() - 0.5));
            }
            labels.push(class);
        }
        let ds = TimeSeriesDataset {
            data,
            labels,
            seq_len: t,
            channels: 1,
            classes: 2,
            split: Split::Train,
            provenance: "separable".into(),
        };
        for arch in Arch::ALL {
            let spec = ModelSpec::new(arch, t, 1, 2, 11).with_hidden(8);
            let mut model = build(&spec).unwrap();
            let cfg = TrainConfig::for_arch(arch, 13).with_epochs(200);
            train(&mut model, &ds, &cfg).unwrap();
            let acc = model.accuracy(&ds).unwrap();
            assert!((acc - 1.0).abs() < 1e-12, "{arch:?} reached only {acc}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = SyntheticConfig {
            n_train: 12,
            n_test: 6,
            seq_len: 16,
            ..SyntheticConfig::default()
        };
        let (train_ds, _) = gen_synthetic(&cfg, 3).unwrap();
        let spec = ModelSpec::new(Arch::BiRnn, 16, 1, 3, 5).with_hidden(6);
        let mut model = build(&spec).unwrap();
        let tc = TrainConfig::for_arch(Arch::BiRnn, 1).with_epochs(2);
        train(&mut model, &train_ds, &tc).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.spec, model.spec);
        let a = model.params.flat_values();
        let b = loaded.params.flat_values();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
