//! Bootstrap-batch training, evaluation and stratified k-fold cross-validation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::event::{EventMatrix, NoiseClass, NoiseEvent};
use crate::ingest::Dataset;
use crate::nn::ops::{self, Mode};
use crate::nn::{AdamHyper, AdamState, InputBatch, Network, NetworkConfig};
use crate::preprocess::{fit_duration_stats, make_event_matrix, DurationStats};
use crate::seed::derive_seed;
use crate::{Error, Result};

/// Events per inference chunk; bounds activation memory.
const EVAL_CHUNK: usize = 256;
/// Events per batch when re-estimating batchnorm statistics after training.
const RECALIBRATION_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub keep_prob: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2000,
            steps: 300,
            learning_rate: 0.0004,
            keep_prob: 0.6,
            seed: 0,
            eval_every: 25,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be >= 1".into()));
        }
        self.network_config().validate()
    }

    /// The network config with this run's learning rate and keep probability.
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            learning_rate: self.learning_rate,
            keep_prob: self.keep_prob,
            ..self.network.clone()
        }
    }
}

/// `size` indices into `0..n`, uniform with replacement, fixed by `(seed, step)`.
pub fn bootstrap_indices(n: usize, size: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xB007, step]));
    Ok((0..size).map(|_| rng.gen_range(0..n)).collect())
}

pub fn bootstrap_batch(dataset: &Dataset, size: usize, seed: u64, step: u64) -> Result<Vec<&NoiseEvent>> {
    let idx = bootstrap_indices(dataset.len(), size, seed, step)?;
    Ok(idx.into_iter().map(|i| &dataset.events()[i]).collect())
}

fn label_index(event: &NoiseEvent) -> Result<usize> {
    event
        .class()
        .map(NoiseClass::index)
        .ok_or_else(|| Error::UnlabeledEvent(event.event_id.clone()))
}

/// Preprocessed, labeled network inputs.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub matrices: Vec<EventMatrix>,
    pub labels: Vec<usize>,
}

impl PreparedSet {
    pub fn new(events: &[NoiseEvent], width: usize, stats: &DurationStats) -> Result<Self> {
        let mut matrices = Vec::with_capacity(events.len());
        let mut labels = Vec::with_capacity(events.len());
        for e in events {
            labels.push(label_index(e)?);
            matrices.push(make_event_matrix(e, width, stats)?);
        }
        Ok(Self { matrices, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Infer-mode probabilities for each matrix.
pub fn predict_matrices(net: &Network, matrices: &[EventMatrix]) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(matrices.len());
    for chunk in matrices.chunks(EVAL_CHUNK) {
        let probs = net.predict(&InputBatch::from_matrices(chunk)?)?;
        out.extend(probs.data().chunks_exact(2).map(|r| [r[0], r[1]]));
    }
    Ok(out)
}

/// Accuracy and confusion counts. `confusion[true][predicted]`, class
/// indices as in [`NoiseClass::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub total: usize,
    pub confusion: [[usize; 2]; 2],
}

/// Argmax decision; ties go to class index 0.
pub fn argmax(probs: &[f64; 2]) -> usize {
    usize::from(probs[1] > probs[0])
}

pub fn score(probs: &[[f64; 2]], labels: &[usize]) -> Evaluation {
    let mut confusion = [[0usize; 2]; 2];
    let mut loss = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        confusion[y][argmax(p)] += 1;
        loss += -p[y].max(ops::PROB_FLOOR).ln();
    }
    let total = labels.len();
    let correct = confusion[0][0] + confusion[1][1];
    Evaluation {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        loss: if total == 0 { 0.0 } else { loss / total as f64 },
        total,
        confusion,
    }
}

pub fn evaluate_prepared(net: &Network, set: &PreparedSet) -> Result<Evaluation> {
    Ok(score(&predict_matrices(net, &set.matrices)?, &set.labels))
}

/// Evaluates `net` on labeled events, preprocessing with the network's own
/// duration statistics.
pub fn evaluate(net: &Network, events: &[NoiseEvent]) -> Result<Evaluation> {
    let set = PreparedSet::new(events, net.config().input_cols, net.duration_stats())?;
    evaluate_prepared(net, &set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub step: usize,
    pub batch_loss: f64,
    pub batch_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub adam: AdamState,
    pub history: Vec<HistoryPoint>,
}

/// Trains a fresh network on `train_set`. Duration statistics come from
/// `train_set` only; `val_set` is used for history and nothing else.
pub fn train(train_set: &[NoiseEvent], val_set: Option<&[NoiseEvent]>, config: &TrainConfig) -> Result<TrainOutcome> {
    train_impl(train_set, val_set, config, false)
}

pub(crate) fn train_impl(
    train_set: &[NoiseEvent],
    val_set: Option<&[NoiseEvent]>,
    config: &TrainConfig,
    allow_zero_lr: bool,
) -> Result<TrainOutcome> {
    let mut checked = config.clone();
    if allow_zero_lr && config.learning_rate == 0.0 {
        checked.learning_rate = NetworkConfig::default().learning_rate;
    }
    checked.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut seen = [false; 2];
    for e in train_set {
        seen[label_index(e)?] = true;
    }
    if !(seen[0] && seen[1]) {
        return Err(Error::SingleClassTrainingSet);
    }
    let net_config = checked.network_config();
    let width = net_config.input_cols;
    let stats = fit_duration_stats(train_set)?;
    let prepared = PreparedSet::new(train_set, width, &stats)?;
    let val = val_set.map(|v| PreparedSet::new(v, width, &stats)).transpose()?;

    let mut net = Network::new(net_config, derive_seed(config.seed, &[0x1217]), stats)?;
    let mut hyper = AdamHyper::from_config(net.config());
    hyper.learning_rate = config.learning_rate;
    let mut adam = AdamState::new(net.params());
    let mut history = Vec::new();
    net.set_mode(Mode::Train);
    for step in 0..config.steps {
        let idx = bootstrap_indices(prepared.len(), config.batch_size, config.seed, step as u64)?;
        let batch = InputBatch::gather(&prepared.matrices, &idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| prepared.labels[i]).collect();
        let probs = net.forward(&batch, derive_seed(config.seed, &[0xD409, step as u64]))?;
        let grads = net.backward(&labels)?;
        let mut params = std::mem::replace(net.params_mut(), grads.zeros_like());
        adam.step(&mut params, &grads, &hyper)?;
        *net.params_mut() = params;

        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            let rows: Vec<[f64; 2]> = probs.data().chunks_exact(2).map(|r| [r[0], r[1]]).collect();
            let batch_eval = score(&rows, &labels);
            let val_eval = match &val {
                Some(v) if !v.is_empty() => {
                    net.set_mode(Mode::Infer);
                    let e = evaluate_prepared(&net, v)?;
                    net.set_mode(Mode::Train);
                    Some(e)
                }
                _ => None,
            };
            history.push(HistoryPoint {
                step: done,
                batch_loss: batch_eval.loss,
                batch_accuracy: batch_eval.accuracy,
                val_loss: val_eval.map(|e| e.loss),
                val_accuracy: val_eval.map(|e| e.accuracy),
            });
        }
    }
    let chunks = prepared
        .matrices
        .chunks(RECALIBRATION_CHUNK)
        .filter(|c| c.len() >= 2)
        .map(InputBatch::from_matrices)
        .collect::<Result<Vec<_>>>()?;
    net.recalibrate_batchnorm(&chunks)?;
    net.set_mode(Mode::Infer);
    Ok(TrainOutcome {
        network: net,
        adam,
        history,
    })
}

/// Class-stratified fold assignment: each class is shuffled and dealt
/// round-robin, continuing across classes, so fold sizes and per-class
/// counts differ by at most one.
pub fn stratified_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || dataset.len() < k {
        return Err(Error::DatasetTooSmall {
            size: dataset.len(),
            required: k.max(2),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xF01D]));
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in NoiseClass::ALL {
        let mut members: Vec<usize> = dataset
            .events()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.class() == Some(class))
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        for i in members {
            folds[next % k].push(i);
            next += 1;
        }
    }
    if let Some(e) = dataset.events().iter().find(|e| e.class().is_none()) {
        return Err(Error::UnlabeledEvent(e.event_id.clone()));
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRun {
    pub fold: usize,
    pub seed_index: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub confusion: [[usize; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seeds_per_fold: usize,
    pub dataset_size: usize,
    pub config: TrainConfig,
    pub runs: Vec<CvRun>,
    pub median_accuracy: f64,
    pub std_accuracy: f64,
}

impl CvReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.accuracy).collect()
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("fold,seed_index,seed,accuracy\n");
        for r in &self.runs {
            s.push_str(&format!("{},{},{},{}\n", r.fold, r.seed_index, r.seed, r.accuracy));
        }
        s
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Stratified k-fold cross-validation with `seeds_per_fold` independently
/// seeded trainings per fold, run on `workers` threads. The report does
/// not depend on the worker count.
pub fn kfold_cv(
    dataset: &Dataset,
    k: usize,
    seeds_per_fold: usize,
    config: &TrainConfig,
    workers: usize,
) -> Result<CvReport> {
    config.validate()?;
    if seeds_per_fold == 0 {
        return Err(Error::InvalidConfig("seeds_per_fold must be >= 1".into()));
    }
    let folds = stratified_folds(dataset, k, config.seed)?;
    let jobs: Vec<(usize, usize)> = (0..k).flat_map(|f| (0..seeds_per_fold).map(move |s| (f, s))).collect();
    let results: Mutex<Vec<Option<Result<CvRun>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let run_job = |job: usize| -> Result<CvRun> {
        let (fold, seed_index) = jobs[job];
        let mut train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        train_idx.sort_unstable();
        let train_set = dataset.select(&train_idx);
        let held_out = dataset.select(&folds[fold]);
        let seed = derive_seed(config.seed, &[fold as u64, seed_index as u64]);
        let run_config = TrainConfig {
            seed,
            ..config.clone()
        };
        let outcome = train(train_set.events(), None, &run_config)?;
        let eval = evaluate(&outcome.network, held_out.events())?;
        Ok(CvRun {
            fold,
            seed_index,
            seed,
            accuracy: eval.accuracy,
            confusion: eval.confusion,
        })
    };
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let job = next.fetch_add(1, Ordering::SeqCst);
                if job >= jobs.len() {
                    break;
                }
                let r = run_job(job);
                let failed = r.is_err();
                results.lock().expect("results lock")[job] = Some(r);
                if failed {
                    next.store(jobs.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut runs = Vec::with_capacity(jobs.len());
    for r in results.into_inner().expect("results lock") {
        match r {
            Some(r) => runs.push(r?),
            None => return Err(Error::InvalidConfig("cross-validation aborted".into())),
        }
    }
    let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    Ok(CvReport {
        k,
        seeds_per_fold,
        dataset_size: dataset.len(),
        config: config.clone(),
        median_accuracy: median(&acc),
        std_accuracy: population_std(&acc),
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Left-closed, right-open bins over [0, 1]; the last bin also holds 1.0.
pub fn accuracy_histogram(accuracies: &[f64], bin_width: f64) -> Result<Vec<HistogramBin>> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::InvalidConfig(format!("bin width must be in (0, 1], got {bin_width}")));
    }
    let bins = (1.0 / bin_width).round() as usize;
    if ((bins as f64) * bin_width - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("bin width {bin_width} does not divide 1")));
    }
    let mut counts = vec![0usize; bins];
    for &a in accuracies {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::InvalidConfig(format!("accuracy {a} outside [0, 1]")));
        }
        // Scaled edges such as 0.97 / 0.01 land a hair below the integer.
        let i = ((a / bin_width) + 1e-9).floor() as usize;
        counts[i.min(bins - 1)] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lower: i as f64 / bins as f64,
            upper: (i + 1) as f64 / bins as f64,
            count,
        })
        .collect())
}

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let decimals = bins
        .first()
        .map(|b| (-(b.upper - b.lower).log10()).ceil().max(0.0) as usize)
        .unwrap_or(2);
    let mut s = String::from("bin_lower,bin_upper,count\n");
    for b in bins {
        s.push_str(&format!("{:.d$},{:.d$},{}\n", b.lower, b.upper, b.count, d = decimals));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_synthetic_dataset;

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            steps: 30,
            eval_every: 10,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn bootstrap_examples() {
        let idx = bootstrap_indices(810, 2000, 1, 0).unwrap();
        assert_eq!(idx.len(), 2000);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert!(sorted.len() < 2000);
        assert_eq!(idx, bootstrap_indices(810, 2000, 1, 0).unwrap());
        assert_ne!(idx, bootstrap_indices(810, 2000, 1, 1).unwrap());
        assert_eq!(bootstrap_indices(1, 1, 9, 4).unwrap(), vec![0]);
        assert!(matches!(bootstrap_indices(0, 4, 1, 0), Err(Error::EmptyDataset)));
    }

    #[test]
    fn bootstrap_batch_from_dataset() {
        let ds = generate_synthetic_dataset(2, 1, 0.0).unwrap();
        let batch = bootstrap_batch(&ds, 7, 1, 0).unwrap();
        assert_eq!(batch.len(), 7);
        let empty = Dataset::new(vec![]).unwrap();
        assert!(matches!(bootstrap_batch(&empty, 1, 1, 0), Err(Error::EmptyDataset)));
    }

    #[test]
    fn histogram_examples() {
        let bins = accuracy_histogram(&[0.97, 0.97, 0.98], 0.01).unwrap();
        assert_eq!(bins.len(), 100);
        assert_eq!(bins[97].count, 2);
        assert_eq!(bins[98].count, 1);
        assert!((bins[97].lower - 0.97).abs() < 1e-12);
        let empty = accuracy_histogram(&[], 0.01).unwrap();
        assert!(empty.iter().all(|b| b.count == 0));
        let one = accuracy_histogram(&[1.0], 0.01).unwrap();
        assert_eq!(one[99].count, 1);
        assert!(accuracy_histogram(&[1.2], 0.01).is_err());
        let csv = histogram_csv(&bins);
        assert!(csv.contains("\n0.97,0.98,2\n"), "{csv}");
    }

    #[test]
    fn score_counts() {
        let p = [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]];
        let e = score(&p, &[0, 1, 0, 0]);
        assert_eq!(e.accuracy, 0.75);
        assert_eq!(e.confusion, [[2, 1], [0, 1]]);
        let e = score(&p[..2], &[1, 0]);
        assert_eq!(e.accuracy, 0.0);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn median_and_std() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!((population_std(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_rejected() {
        let ds = generate_synthetic_dataset(3, 1, 0.0).unwrap();
        let aircraft: Vec<_> = ds
            .events()
            .iter()
            .filter(|e| e.class() == Some(NoiseClass::Aircraft))
            .cloned()
            .collect();
        assert!(matches!(
            train(&aircraft, None, &small_config()),
            Err(Error::SingleClassTrainingSet)
        ));
    }

    #[test]
    fn training_is_deterministic_and_ignores_validation() {
        let ds = generate_synthetic_dataset(12, 5, 0.2).unwrap();
        let (train_set, val) = ds.events().split_at(18);
        let a = train(train_set, Some(val), &small_config()).unwrap();
        let b = train(train_set, Some(val), &small_config()).unwrap();
        assert_eq!(a.network.params(), b.network.params());
        assert_eq!(a.network.running_stats(), b.network.running_stats());
        let mut altered = val.to_vec();
        altered.swap(0, 1);
        altered.pop();
        let c = train(train_set, Some(&altered), &small_config()).unwrap();
        assert_eq!(a.network.params(), c.network.params());
        assert_eq!(a.history.len(), 3);
        assert_eq!(a.history.last().unwrap().step, 30);
        assert!(a.history.iter().all(|h| h.val_accuracy.is_some()));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = generate_synthetic_dataset(6, 2, 0.0).unwrap();
        let config = TrainConfig {
            learning_rate: 0.0,
            ..small_config()
        };
        assert!(train(ds.events(), None, &config).is_err());
        let out = train_impl(ds.events(), None, &config, true).unwrap();
        let stats = fit_duration_stats(ds.events()).unwrap();
        let fresh = Network::new(small_config().network_config(), derive_seed(3, &[0x1217]), stats).unwrap();
        assert_eq!(out.network.params(), fresh.params());
    }

    #[test]
    fn folds_are_stratified() {
        let ds = generate_synthetic_dataset(23, 4, 0.0).unwrap();
        let folds = stratified_folds(&ds, 10, 1).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..46).collect::<Vec<_>>());
        for f in &folds {
            let air = f.iter().filter(|&&i| ds.events()[i].class() == Some(NoiseClass::Aircraft)).count();
            let expected = 23.0 * f.len() as f64 / 46.0;
            assert!((air as f64 - expected).abs() <= 1.0, "{air} vs {expected}");
        }
        assert!(matches!(
            stratified_folds(&ds.select(&[0, 1, 2]), 10, 1),
            Err(Error::DatasetTooSmall { .. })
        ));
    }

    #[test]
    fn minimal_cv_is_well_formed_and_deterministic() {
        let ds = generate_synthetic_dataset(2, 8, 0.0).unwrap();
        let config = TrainConfig {
            batch_size: 4,
            steps: 2,
            ..small_config()
        };
        let a = kfold_cv(&ds, 2, 1, &config, 1).unwrap();
        assert_eq!(a.runs.len(), 2);
        assert!(a.runs.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
        let b = kfold_cv(&ds, 2, 1, &config, 2).unwrap();
        assert_eq!(a, b);
    }
}
