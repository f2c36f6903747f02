//! Two-stage SGD training, the scratch / TL / TI protocols and multi-restart
//! accounting.

use std::collections::HashMap;
use std::sync::mpsc::sync_channel;
use std::thread;

use rand::seq::SliceRandom;

use crate::augment::AugmentSpec;
use crate::backbone::{Backbone, FeatureSet, MiniCnnConfig};
use crate::checkpoint::{Checkpoint, IntoAny};
use crate::error::{dim_err, Error, Result};
use crate::heads::{head_init, Head, HeadConfig};
use crate::ingest::LabeledImageSet;
use crate::layers::{mix_seed, seeded_rng, Parameterized};
use crate::metrics::{confusion_from_predictions, overall_accuracy, ConfusionMatrix};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// `base_lr · gamma^⌊epoch / step_size⌋`, by repeated multiplication so
/// `0.01 · 0.1` gives exactly the same `f64` as the literal `0.001`.
pub fn step_lr(base_lr: f64, epoch: usize, step_size: usize, gamma: f64) -> f64 {
    let steps = epoch.checked_div(step_size).unwrap_or(0);
    (0..steps).fold(base_lr, |lr, _| lr * gamma)
}

/// `v ← μ·v + g; p ← p − lr·v`. An empty buffer starts at zero.
pub fn sgd_momentum_step<T: Scalar>(param: &mut Tensor<T>, grad: &[T], buffer: &mut Vec<T>, lr: T, momentum: T) -> Result<()> {
    if grad.len() != param.numel() {
        return Err(dim_err(format!(
            "gradient of {} elements for parameter {:?}",
            grad.len(),
            param.shape()
        )));
    }
    if buffer.is_empty() {
        buffer.resize(grad.len(), T::zero());
    } else if buffer.len() != grad.len() {
        return Err(dim_err(format!(
            "momentum buffer of {} elements for parameter {:?}",
            buffer.len(),
            param.shape()
        )));
    }
    for ((p, v), &g) in param.data_mut().iter_mut().zip(buffer.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p = *p - lr * *v;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Scratch,
    /// Backbone copied from the source and frozen.
    TransferLearning,
    /// Backbone copied from the source, everything trainable.
    TransferredInit,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Scratch => "scratch",
            Protocol::TransferLearning => "TL",
            Protocol::TransferredInit => "TI",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage {
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub stages: Vec<Stage>,
    pub momentum: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub batch_size: usize,
}

impl Default for Schedule {
    /// Ten epochs at 0.01 then ten at 0.001, momentum 0.9, decay 0.1 every
    /// 7 epochs, batches of 64.
    fn default() -> Self {
        Schedule {
            stages: vec![Stage { lr: 0.01, epochs: 10 }, Stage { lr: 0.001, epochs: 10 }],
            momentum: 0.9,
            step_size: 7,
            gamma: 0.1,
            batch_size: 64,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("schedule has no stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.lr > 0.0 && s.lr.is_finite()) || s.epochs == 0 {
                return Err(Error::Config(format!(
                    "stage {} needs lr > 0 and epochs ≥ 1, got lr {} epochs {}",
                    i + 1,
                    s.lr,
                    s.epochs
                )));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.step_size == 0 || self.batch_size == 0 {
            return Err(Error::Config("step_size and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    /// `(stage number from 1, lr)` for every epoch in order.
    pub fn lr_trace(&self) -> Vec<(usize, f64)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.epochs).map(move |e| (i + 1, step_lr(s.lr, e, self.step_size, self.gamma))))
            .collect()
    }
}

/// Inputs (`N×C×H×W` images or `N×D` features) with labels.
#[derive(Clone, Debug)]
pub struct Samples {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Samples {
    pub fn new(inputs: Tensor<f32>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if inputs.rank() < 2 || inputs.shape()[0] != labels.len() {
            return Err(dim_err(format!("{} labels for inputs {:?}", labels.len(), inputs.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Data(format!("label {bad} with {} classes", class_names.len())));
        }
        Ok(Samples {
            inputs,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }
}

impl From<LabeledImageSet> for Samples {
    fn from(s: LabeledImageSet) -> Self {
        Samples {
            inputs: s.images,
            labels: s.labels,
            class_names: s.class_names,
        }
    }
}

impl Samples {
    pub fn from_features(set: FeatureSet, class_names: Vec<String>) -> Result<Self> {
        Samples::new(set.features, set.labels, class_names)
    }
}

pub fn gather_rows(t: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let row = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * row);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * row..(r + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data)
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub backbone: Option<Backbone<T>>,
    pub head: Head<T>,
}

impl<T: Scalar> Parameterized<T> for Model<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        if let Some(bb) = &self.backbone {
            bb.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(bb) = &mut self.backbone {
            bb.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(backbone: Option<Backbone<T>>, head: Head<T>) -> Result<Self> {
        if let Some(bb) = &backbone {
            if bb.feature_dim() != head.config().input_dim() {
                return Err(dim_err(format!(
                    "backbone yields {} features but the head expects {}",
                    bb.feature_dim(),
                    head.config().input_dim()
                )));
            }
        }
        Ok(Model { backbone, head })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: crate::tape::Var) -> Result<crate::tape::Var> {
        let features = match &self.backbone {
            Some(bb) => bb.forward(tape, x)?,
            None => x,
        };
        self.head.forward(tape, features)
    }

    /// Same weights with every tensor non-trainable, for inference.
    pub fn inference_view(&self) -> Self {
        let mut m = self.clone();
        m.set_trainable(false);
        m
    }

    /// Serialized backbone tensors (empty checkpoint without a backbone).
    pub fn backbone_checkpoint(&self) -> Result<Checkpoint>
    where
        Tensor<T>: IntoAny,
    {
        match &self.backbone {
            Some(bb) => Checkpoint::from_model(bb),
            None => Ok(Checkpoint::new()),
        }
    }

    pub fn from_checkpoint(backbone: Option<MiniCnnConfig>, head: &HeadConfig, ck: &Checkpoint) -> Result<Self> {
        let lookup = |name: &str| ck.get_as::<T>(name);
        let bb = backbone.map(|cfg| Backbone::from_named(cfg, &lookup)).transpose()?;
        Model::new(bb, Head::from_named(head, &lookup)?)
    }
}

/// Backbone init seed for a run seed.
pub fn backbone_seed(seed: u64) -> u64 {
    mix_seed(&[seed, 1])
}

/// Head init seed for a run seed.
pub fn head_seed(seed: u64) -> u64 {
    mix_seed(&[seed, 2])
}

/// Builds the model for a protocol. Heads are always freshly initialized.
pub fn prepare_protocol(
    protocol: Protocol,
    backbone: Option<&MiniCnnConfig>,
    head: &HeadConfig,
    source: Option<&Checkpoint>,
    seed: u64,
) -> Result<Model<f32>> {
    let head = head_init::<f32>(head, head_seed(seed))?;
    let bb = match (protocol, backbone) {
        (Protocol::Scratch, Some(cfg)) => Some(Backbone::init(cfg.clone(), backbone_seed(seed))?),
        (Protocol::Scratch, None) => None,
        (_, None) => {
            return Err(Error::Config(format!(
                "protocol {} transfers backbone weights but no backbone is configured",
                protocol.name()
            )))
        }
        (_, Some(cfg)) => {
            let source = source.ok_or_else(|| {
                Error::Config(format!("protocol {} requires a source checkpoint", protocol.name()))
            })?;
            let mut bb = Backbone::from_named(cfg.clone(), &|name| source.get_as::<f32>(name))?;
            if protocol == Protocol::TransferLearning {
                bb.freeze();
            }
            Some(bb)
        }
    };
    Model::new(bb, head)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_BATCH: usize = 256;

pub fn predict(model: &Model<f32>, inputs: &Tensor<f32>, transform: Option<&AugmentSpec>) -> Result<Vec<usize>> {
    let view = model.inference_view();
    let n = inputs.shape()[0];
    let mut out = Vec::with_capacity(n);
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let batch = match transform {
            Some(spec) => spec.apply_batch(inputs, chunk, 0)?,
            None => gather_rows(inputs, chunk)?,
        };
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let logits = view.forward(&mut tape, x)?;
        let c = tape.shape(logits)[1];
        out.extend(tape.value(logits).chunks_exact(c).map(argmax));
    }
    Ok(out)
}

pub fn evaluate(model: &Model<f32>, data: &Samples, transform: Option<&AugmentSpec>) -> Result<ConfusionMatrix> {
    let pred = predict(model, &data.inputs, transform)?;
    confusion_from_predictions(&data.labels, &pred, data.class_names.clone())
}

/// Train, validation and optional test data plus the input transforms.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Samples,
    pub val: Samples,
    pub test: Option<Samples>,
    pub train_transform: Option<AugmentSpec>,
    pub eval_transform: Option<AugmentSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based across all stages.
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Running accuracy over the epoch's training batches.
    pub train_acc: f64,
    pub val_acc: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,stage,lr,train_acc,val_acc\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.epoch, r.stage, r.lr, r.train_acc, r.val_acc
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model<f32>,
    pub momentum: HashMap<String, Vec<f32>>,
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
    pub best: Option<(usize, f64, Model<f32>)>,
}

impl TrainState {
    pub fn new(model: Model<f32>) -> Self {
        TrainState {
            model,
            momentum: HashMap::new(),
            epochs_done: 0,
            history: Vec::new(),
            best: None,
        }
    }

    /// Best-validation model, or the current one before any epoch.
    pub fn best_model(&self) -> &Model<f32> {
        self.best.as_ref().map_or(&self.model, |(_, _, m)| m)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub test: Option<ConfusionMatrix>,
}

impl TrainOutcome {
    pub fn test_accuracy(&self) -> Option<f64> {
        self.test.as_ref().and_then(|m| overall_accuracy(m).ok())
    }
}

/// Runs every stage of `schedule`; each stage restarts the step decay and
/// keeps the momentum buffers. Test data is scored with the best-validation
/// snapshot.
pub fn two_stage_train(model: Model<f32>, data: &TrainData, schedule: &Schedule, seed: u64) -> Result<TrainOutcome> {
    schedule.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let mut state = TrainState::new(model);
    for (stage, lr) in schedule.lr_trace() {
        train_epoch(&mut state, data, schedule, stage, lr, seed)?;
    }
    let test = match &data.test {
        Some(t) => Some(evaluate(state.best_model(), t, data.eval_transform.as_ref())?),
        None => None,
    };
    Ok(TrainOutcome { state, test })
}

type Batch = (Tensor<f32>, Vec<usize>);

/// One pass over the shuffled training set followed by validation.
pub fn train_epoch(state: &mut TrainState, data: &TrainData, schedule: &Schedule, stage: usize, lr: f64, seed: u64) -> Result<()> {
    let epoch = state.epochs_done;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut seeded_rng(&[seed, 0x4550_4f43, epoch as u64]));
    let batches: Vec<&[usize]> = order.chunks(schedule.batch_size).collect();

    let (mut correct, mut seen, mut loss_sum) = (0usize, 0usize, 0.0f64);
    let (lr_t, mu) = (lr as f32, schedule.momentum as f32);
    thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Batch>>(2);
        let producer = scope.spawn(move || {
            for idx in &batches {
                let batch = match &data.train_transform {
                    Some(spec) => spec.apply_batch(&data.train.inputs, idx, epoch as u64),
                    None => gather_rows(&data.train.inputs, idx),
                };
                let labels = idx.iter().map(|&i| data.train.labels[i]).collect();
                if tx.send(batch.map(|b| (b, labels))).is_err() {
                    break;
                }
            }
        });
        for item in rx {
            let (inputs, labels) = item?;
            let mut tape = Tape::new();
            let x = tape.constant(inputs);
            let logits = state.model.forward(&mut tape, x)?;
            let c = tape.shape(logits)[1];
            correct += tape
                .value(logits)
                .chunks_exact(c)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let loss_value = tape.value(loss)[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Divergence { epoch: epoch + 1, lr });
            }
            loss_sum += loss_value * labels.len() as f64;
            seen += labels.len();
            let grads = tape.backward(loss)?;
            let mut result = Ok(());
            let momentum = &mut state.momentum;
            state.model.visit_params_mut(&mut |name, p| {
                if let (Ok(()), Some(g)) = (&result, grads.of(p)) {
                    let buf = momentum.entry(name.to_string()).or_default();
                    result = sgd_momentum_step(p, g, buf, lr_t, mu);
                }
            });
            result?;
        }
        producer.join().expect("batch producer panicked");
        Ok(())
    })?;

    let val = overall_accuracy(&evaluate(&state.model, &data.val, data.eval_transform.as_ref())?)?;
    state.epochs_done += 1;
    state.history.push(EpochRecord {
        epoch: state.epochs_done,
        stage,
        lr,
        train_loss: loss_sum / seen as f64,
        train_acc: correct as f64 / seen as f64,
        val_acc: val,
    });
    if state.best.as_ref().is_none_or(|(_, best, _)| val > *best) {
        state.best = Some((state.epochs_done, val, state.model.clone()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub top: f64,
    pub average: f64,
}

impl RunSummary {
    pub fn from_runs(seeds: Vec<u64>, accuracies: Vec<f64>) -> Result<Self> {
        if accuracies.is_empty() || seeds.len() != accuracies.len() {
            return Err(Error::Data("summary needs one accuracy per restart".into()));
        }
        let top = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let average = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        Ok(RunSummary {
            seeds,
            accuracies,
            top,
            average,
        })
    }
}

/// Runs `job(k, seed + k)` for `k in 0..restarts` on up to `workers`
/// threads. Results come back ordered by restart index; the first failing
/// restart is reported with its index.
pub fn multi_restart<R, F>(restarts: usize, workers: usize, seed: u64, job: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize, u64) -> Result<R> + Sync,
{
    if restarts == 0 {
        return Err(Error::Config("restarts must be at least 1".into()));
    }
    let workers = workers.clamp(1, restarts);
    let mut slots: Vec<Option<Result<R>>> = (0..restarts).map(|_| None).collect();
    if workers == 1 {
        for (k, slot) in slots.iter_mut().enumerate() {
            *slot = Some(job(k, seed.wrapping_add(k as u64)));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results = std::sync::Mutex::new(&mut slots);
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if k >= restarts {
                        break;
                    }
                    let r = job(k, seed.wrapping_add(k as u64));
                    results.lock().expect("result slots")[k] = Some(r);
                });
            }
        });
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(k, r)| {
            r.expect("every restart ran").map_err(|e| Error::Restart {
                restart: k,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{SpinalHeadConfig, TraditionalHeadConfig};

    #[test]
    fn schedule_examples() {
        assert_eq!(step_lr(0.01, 6, 7, 0.1), 0.01);
        assert_eq!(step_lr(0.01, 7, 7, 0.1), 0.001);
        assert_eq!(step_lr(0.01, 14, 7, 0.1), 0.0001);
        assert_eq!(step_lr(0.5, 100, 7, 1.0), 0.5);
        let trace: Vec<f64> = Schedule::default().lr_trace().into_iter().map(|(_, lr)| lr).collect();
        let mut expect = vec![0.01; 7];
        expect.extend([0.001; 3]);
        expect.extend([0.001; 7]);
        expect.extend([0.0001; 3]);
        assert_eq!(trace, expect);
    }

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::<f64>::full(&[2], 1.0);
        let mut v = Vec::new();
        for k in 1..=3 {
            sgd_momentum_step(&mut p, &[0.25, -0.5], &mut v, 1.0, 0.0).unwrap();
            assert_eq!(p.data(), &[1.0 - 0.25 * k as f64, 1.0 + 0.5 * k as f64]);
        }
        let mut p = Tensor::<f64>::zeros(&[1]);
        let mut v = Vec::new();
        for k in 1..=12 {
            sgd_momentum_step(&mut p, &[2.0], &mut v, 0.01, 0.9).unwrap();
            let oracle = 2.0 * (1.0 - 0.9f64.powi(k)) / 0.1;
            assert!((v[0] - oracle).abs() < 1e-12);
        }
        let mut p = Tensor::<f64>::full(&[3], 0.7);
        let mut v = Vec::new();
        for _ in 0..5 {
            sgd_momentum_step(&mut p, &[0.0; 3], &mut v, 0.1, 0.9).unwrap();
        }
        assert_eq!(p.data(), &[0.7; 3]);
        assert!(sgd_momentum_step(&mut p, &[0.0; 2], &mut v, 0.1, 0.9).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn summary_laws() {
        let s = RunSummary::from_runs(vec![4], vec![0.9]).unwrap();
        assert_eq!((s.top, s.average), (0.9, 0.9));
        let s = RunSummary::from_runs(vec![0, 1, 2], vec![0.5, 0.75, 0.7]).unwrap();
        assert_eq!(s.top, 0.75);
        assert!(s.top >= s.average);
    }

    #[test]
    fn restarts_ordered_and_errors_indexed() {
        let r = multi_restart(5, 3, 10, |k, s| Ok((k, s))).unwrap();
        assert_eq!(r, (0..5).map(|k| (k, 10 + k as u64)).collect::<Vec<_>>());
        let e = multi_restart(3, 2, 0, |k, _| if k == 1 { Err(Error::Data("x".into())) } else { Ok(k) });
        assert!(matches!(e, Err(Error::Restart { restart: 1, .. })));
        assert!(multi_restart(0, 1, 0, |k, _| Ok(k)).is_err());
    }

    fn blobs(n: usize, seed: u64) -> Samples {
        use rand::Rng;
        let mut rng = seeded_rng(&[seed]);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 3;
            for d in 0..6 {
                let centre = if d % 3 == c { 1.0 } else { 0.0 };
                x.push(centre + rng.gen_range(-0.3..0.3));
            }
            y.push(c);
        }
        Samples::new(Tensor::new(vec![n, 6], x).unwrap(), y, vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    fn blob_data() -> TrainData {
        TrainData {
            train: blobs(90, 1),
            val: blobs(30, 2),
            test: Some(blobs(30, 3)),
            train_transform: None,
            eval_transform: None,
        }
    }

    #[test]
    fn two_stage_run_on_features() {
        let head = HeadConfig::Spinal(SpinalHeadConfig::new(6, 4, 3, 3));
        let model = prepare_protocol(Protocol::Scratch, None, &head, None, 3).unwrap();
        let schedule = Schedule {
            stages: vec![Stage { lr: 0.05, epochs: 3 }, Stage { lr: 0.01, epochs: 2 }],
            batch_size: 16,
            ..Schedule::default()
        };
        let out = two_stage_train(model, &blob_data(), &schedule, 3).unwrap();
        assert_eq!(out.state.history.len(), 5);
        assert_eq!(out.state.history[3].stage, 2);
        assert_eq!(out.state.history[3].lr, 0.01);
        assert!(out.test_accuracy().unwrap() > 0.9);
        let again = two_stage_train(
            prepare_protocol(Protocol::Scratch, None, &head, None, 3).unwrap(),
            &blob_data(),
            &schedule,
            3,
        )
        .unwrap();
        assert_eq!(again.state.history, out.state.history);
        let csv = history_csv(&out.state.history);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("epoch,stage,lr,train_acc,val_acc\n1,1,0.05,"));
    }

    #[test]
    fn divergence_and_empty_data() {
        let head = HeadConfig::Traditional(TraditionalHeadConfig {
            input_dim: 6,
            hidden: 4,
            classes: 3,
        });
        let model = prepare_protocol(Protocol::Scratch, None, &head, None, 0).unwrap();
        let mut data = blob_data();
        data.train.inputs.data_mut()[0] = f32::NAN;
        let err = two_stage_train(model.clone(), &data, &Schedule::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, lr } if lr == 0.01));
        let mut data = blob_data();
        data.train.labels.clear();
        assert!(matches!(two_stage_train(model, &data, &Schedule::default(), 0), Err(Error::Data(_))));
    }

    #[test]
    fn protocols_need_source_and_backbone() {
        let head = HeadConfig::Spinal(SpinalHeadConfig::new(1568, 8, 2, 10));
        let cfg = MiniCnnConfig::mnist();
        assert!(matches!(
            prepare_protocol(Protocol::TransferLearning, Some(&cfg), &head, None, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            prepare_protocol(Protocol::TransferredInit, None, &head, None, 0),
            Err(Error::Config(_))
        ));
        let source = prepare_protocol(Protocol::Scratch, Some(&cfg), &head, None, 5).unwrap();
        let ck = source.backbone_checkpoint().unwrap();
        let tl = prepare_protocol(Protocol::TransferLearning, Some(&cfg), &head, Some(&ck), 9).unwrap();
        assert!(tl.backbone.as_ref().unwrap().is_frozen());
        assert_eq!(tl.backbone_checkpoint().unwrap().encode(), ck.encode());
        let ti = prepare_protocol(Protocol::TransferredInit, Some(&cfg), &head, Some(&ck), 9).unwrap();
        assert!(!ti.backbone.as_ref().unwrap().is_frozen());
        let mut wrong = MiniCnnConfig::mnist();
        wrong.widths = vec![8, 32];
        match prepare_protocol(Protocol::TransferredInit, Some(&wrong), &head, Some(&ck), 9) {
            Err(Error::Transfer(msg)) => assert!(msg.contains("backbone.conv0.weight"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let a = Checkpoint::from_model(&prepare_protocol(Protocol::Scratch, Some(&cfg), &head, None, 5).unwrap()).unwrap();
        assert_eq!(a.encode(), Checkpoint::from_model(&source).unwrap().encode());
    }
}
