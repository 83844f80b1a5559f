//! The event classifier network.
//!
//! ```text
//! input 1×R×C
//!   → conv 3×3 (F1) → batchnorm → ReLU → dropout → maxpool 2×2
//!   → conv 3×3 (F2) → batchnorm → ReLU → dropout → maxpool 2×2
//!   → flatten ⊕ duration feature
//!   → dense (H) → batchnorm → ReLU → dropout
//!   → dense (2) → softmax
//! ```
//!
//! Convolutions and the hidden dense layer carry no bias: each feeds a
//! batchnorm whose shift parameter takes that role.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, BatchNormCache, ConvGeometry, Mode};
use super::Tensor;
use crate::event::{EventMatrix, CHANNELS, DEFAULT_WIDTH};
use crate::preprocess::DurationStats;
use crate::seed::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_rows: usize,
    pub input_cols: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool: usize,
    pub dense_hidden: usize,
    pub classes: usize,
    pub keep_prob: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batchnorm_momentum: f64,
    pub batchnorm_epsilon: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_rows: CHANNELS,
            input_cols: DEFAULT_WIDTH,
            conv1_filters: 8,
            conv2_filters: 16,
            kernel: 3,
            stride: 1,
            padding: 0,
            pool: 2,
            dense_hidden: 64,
            classes: 2,
            keep_prob: 0.6,
            learning_rate: 0.0004,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batchnorm_momentum: 0.9,
            batchnorm_epsilon: 1e-5,
        }
    }
}

/// Per-sample spatial sizes along the layer chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub input: (usize, usize),
    pub conv1: (usize, usize),
    pub pool1: (usize, usize),
    pub conv2: (usize, usize),
    pub pool2: (usize, usize),
    /// Flattened pool2 features, excluding the duration feature.
    pub flat: usize,
}

impl Geometry {
    pub fn dense_inputs(&self) -> usize {
        self.flat + 1
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.kernel != 3 || self.stride != 1 || self.padding != 0 || self.pool != 2 {
            return bad(format!(
                "only 3×3 kernels, unit stride, no padding and 2×2 pooling are supported \
                 (kernel {}, stride {}, padding {}, pool {})",
                self.kernel, self.stride, self.padding, self.pool
            ));
        }
        if self.classes != 2 {
            return bad(format!("classes must be 2, got {}", self.classes));
        }
        if self.conv1_filters == 0 || self.conv2_filters == 0 || self.dense_hidden == 0 {
            return bad("filter counts and dense width must be >= 1".into());
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("keep_prob must be in (0, 1], got {}", self.keep_prob));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must be in [0, 1)".into());
        }
        if !(self.adam_epsilon > 0.0 && self.batchnorm_epsilon > 0.0) {
            return bad("epsilons must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.batchnorm_momentum) {
            return bad("batchnorm_momentum must be in [0, 1]".into());
        }
        self.geometry().map(|_| ())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let conv = |(h, w): (usize, usize)| -> Result<(usize, usize)> {
            if h < 3 || w < 3 {
                return Err(Error::InvalidConfig(format!("{h}×{w} too small for a 3×3 kernel")));
            }
            Ok((h - 2, w - 2))
        };
        let pool = |(h, w): (usize, usize)| -> Result<(usize, usize)> {
            if h < 2 || w < 2 {
                return Err(Error::InvalidConfig(format!("{h}×{w} too small for 2×2 pooling")));
            }
            Ok((h / 2, w / 2))
        };
        let input = (self.input_rows, self.input_cols);
        let conv1 = conv(input)?;
        let pool1 = pool(conv1)?;
        let conv2 = conv(pool1)?;
        let pool2 = pool(conv2)?;
        Ok(Geometry {
            input,
            conv1,
            pool1,
            conv2,
            pool2,
            flat: self.conv2_filters * pool2.0 * pool2.1,
        })
    }
}

/// Trainable parameters in their fixed checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    Conv1Kernels,
    Bn1Gamma,
    Bn1Beta,
    Conv2Kernels,
    Bn2Gamma,
    Bn2Beta,
    Dense1Weights,
    Bn3Gamma,
    Bn3Beta,
    OutWeights,
    OutBias,
}

impl ParamId {
    pub const ALL: [ParamId; 11] = [
        ParamId::Conv1Kernels,
        ParamId::Bn1Gamma,
        ParamId::Bn1Beta,
        ParamId::Conv2Kernels,
        ParamId::Bn2Gamma,
        ParamId::Bn2Beta,
        ParamId::Dense1Weights,
        ParamId::Bn3Gamma,
        ParamId::Bn3Beta,
        ParamId::OutWeights,
        ParamId::OutBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Conv1Kernels => "conv1.kernels",
            ParamId::Bn1Gamma => "bn1.gamma",
            ParamId::Bn1Beta => "bn1.beta",
            ParamId::Conv2Kernels => "conv2.kernels",
            ParamId::Bn2Gamma => "bn2.gamma",
            ParamId::Bn2Beta => "bn2.beta",
            ParamId::Dense1Weights => "dense1.weights",
            ParamId::Bn3Gamma => "bn3.gamma",
            ParamId::Bn3Beta => "bn3.beta",
            ParamId::OutWeights => "dense_out.weights",
            ParamId::OutBias => "dense_out.bias",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// One tensor per [`ParamId`]; also used for gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        let g = config.geometry()?;
        let (f1, f2, h) = (config.conv1_filters, config.conv2_filters, config.dense_hidden);
        let shape = |p: ParamId| -> Vec<usize> {
            match p {
                ParamId::Conv1Kernels => vec![f1, 1, 3, 3],
                ParamId::Bn1Gamma | ParamId::Bn1Beta => vec![f1],
                ParamId::Conv2Kernels => vec![f2, f1, 3, 3],
                ParamId::Bn2Gamma | ParamId::Bn2Beta => vec![f2],
                ParamId::Dense1Weights => vec![g.dense_inputs(), h],
                ParamId::Bn3Gamma | ParamId::Bn3Beta => vec![h],
                ParamId::OutWeights => vec![h, config.classes],
                ParamId::OutBias => vec![config.classes],
            }
        };
        Ok(Self {
            tensors: ParamId::ALL.iter().map(|&p| Tensor::zeros(&shape(p))).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        ParamId::ALL.into_iter().zip(&self.tensors)
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn same_shapes(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.same_shape(b))
    }
}

impl std::ops::Index<ParamId> for ParamSet {
    type Output = Tensor;
    fn index(&self, p: ParamId) -> &Tensor {
        &self.tensors[p.index()]
    }
}

impl std::ops::IndexMut<ParamId> for ParamSet {
    fn index_mut(&mut self, p: ParamId) -> &mut Tensor {
        &mut self.tensors[p.index()]
    }
}

/// Running statistics of one batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    fn update(&mut self, momentum: f64, cache: &BatchNormCache) {
        for (r, b) in self.mean.iter_mut().zip(&cache.batch_mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&cache.batch_var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

/// A batch of network inputs: `[n, 1, rows, cols]` plus one duration per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBatch {
    pub len: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub durations: Vec<f64>,
}

impl InputBatch {
    pub fn from_matrices<'a>(matrices: impl IntoIterator<Item = &'a EventMatrix>) -> Result<Self> {
        let mut values = Vec::new();
        let mut durations = Vec::new();
        let mut cols = None;
        for m in matrices {
            if *cols.get_or_insert(m.width) != m.width || m.values.len() != CHANNELS * m.width {
                return Err(Error::ShapeMismatch(format!(
                    "matrix `{}` is {}×{}, batch expects width {:?}",
                    m.source_event_id,
                    m.values.len() / m.width.max(1),
                    m.width,
                    cols
                )));
            }
            values.extend_from_slice(&m.values);
            durations.push(m.duration_feature);
        }
        Ok(Self {
            len: durations.len(),
            rows: CHANNELS,
            cols: cols.unwrap_or(DEFAULT_WIDTH),
            values,
            durations,
        })
    }

    /// Gathers `indices` (duplicates allowed) from a pool of matrices.
    pub fn gather(pool: &[EventMatrix], indices: &[usize]) -> Result<Self> {
        Self::from_matrices(indices.iter().map(|&i| &pool[i]))
    }

    /// Raw constructor for arbitrary input sizes.
    pub fn from_raw(rows: usize, cols: usize, values: Vec<f64>, durations: Vec<f64>) -> Result<Self> {
        if values.len() != durations.len() * rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} samples of {rows}×{cols}",
                values.len(),
                durations.len()
            )));
        }
        Ok(Self {
            len: durations.len(),
            rows,
            cols,
            values,
            durations,
        })
    }

    /// Duplicates every sample once, in place order `[a, a', b, b', ...]`.
    pub fn duplicated(&self) -> Self {
        let plane = self.rows * self.cols;
        let mut values = Vec::with_capacity(self.values.len() * 2);
        let mut durations = Vec::with_capacity(self.len * 2);
        for i in 0..self.len {
            for _ in 0..2 {
                values.extend_from_slice(&self.values[i * plane..(i + 1) * plane]);
                durations.push(self.durations[i]);
            }
        }
        Self {
            len: self.len * 2,
            rows: self.rows,
            cols: self.cols,
            values,
            durations,
        }
    }
}

/// Everything backward needs from one train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n: usize,
    input: Vec<f64>,
    bn1: BatchNormCache,
    mask1: Vec<bool>,
    arg1: Vec<u32>,
    pool1: Vec<f64>,
    bn2: BatchNormCache,
    mask2: Vec<bool>,
    arg2: Vec<u32>,
    flat: Vec<f64>,
    bn3: BatchNormCache,
    mask3: Vec<bool>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl ForwardCache {
    /// True when every ReLU gate and pooling choice matches `other`.
    pub fn same_activation_pattern(&self, other: &ForwardCache) -> bool {
        self.mask1 == other.mask1
            && self.mask2 == other.mask2
            && self.mask3 == other.mask3
            && self.arg1 == other.arg1
            && self.arg2 == other.arg2
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Per-sample shape recorded at one stage of a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: &'static str,
    pub shape: Vec<usize>,
}

pub(crate) struct ForwardOutput {
    pub probs: Vec<f64>,
    pub cache: Option<ForwardCache>,
    pub shapes: Vec<StageShape>,
}

fn record(shapes: &mut Vec<StageShape>, stage: &'static str, shape: Vec<usize>, buf: usize, n: usize) {
    let per_sample: usize = shape.iter().product();
    assert_eq!(
        per_sample * n,
        buf,
        "stage {stage}: buffer of {buf} does not hold {n} samples of {shape:?}"
    );
    shapes.push(StageShape { stage, shape });
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    geometry: Geometry,
    params: ParamSet,
    running: [RunningStats; 3],
    duration_stats: DurationStats,
    version: String,
    mode: Mode,
    cache: Option<ForwardCache>,
}

impl Network {
    /// Fresh network: He-normal weights from `seed`, zero biases, unit γ.
    pub fn new(config: NetworkConfig, seed: u64, duration_stats: DurationStats) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry()?;
        let mut params = ParamSet::zeros(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = |p: ParamId| -> Option<usize> {
            match p {
                ParamId::Conv1Kernels => Some(9),
                ParamId::Conv2Kernels => Some(config.conv1_filters * 9),
                ParamId::Dense1Weights => Some(geometry.dense_inputs()),
                ParamId::OutWeights => Some(config.dense_hidden),
                _ => None,
            }
        };
        for p in ParamId::ALL {
            if let Some(fan) = fan_in(p) {
                let normal = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("valid std");
                params[p].data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        }
        for p in [ParamId::Bn1Gamma, ParamId::Bn2Gamma, ParamId::Bn3Gamma] {
            params[p].fill(1.0);
        }
        let running = [
            RunningStats::new(config.conv1_filters),
            RunningStats::new(config.conv2_filters),
            RunningStats::new(config.dense_hidden),
        ];
        Ok(Self {
            config,
            geometry,
            params,
            running,
            duration_stats,
            version: "untrained".into(),
            mode: Mode::Train,
            cache: None,
        })
    }

    /// Reassembles a network from stored parts (checkpoint loading).
    pub fn from_parts(
        config: NetworkConfig,
        params: ParamSet,
        running: [RunningStats; 3],
        duration_stats: DurationStats,
        version: String,
    ) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry()?;
        if !params.same_shapes(&ParamSet::zeros(&config)?) {
            return Err(Error::ShapeMismatch("parameters do not match config".into()));
        }
        let sizes = [config.conv1_filters, config.conv2_filters, config.dense_hidden];
        for (r, n) in running.iter().zip(sizes) {
            if r.mean.len() != n || r.var.len() != n {
                return Err(Error::ShapeMismatch("running statistics do not match config".into()));
            }
            if r.var.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidConfig("negative running variance".into()));
            }
        }
        Ok(Self {
            config,
            geometry,
            params,
            running,
            duration_stats,
            version,
            mode: Mode::Infer,
            cache: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats; 3] {
        &self.running
    }

    pub fn duration_stats(&self) -> &DurationStats {
        &self.duration_stats
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn set_version(&mut self, version: impl Into<String>) {
        self.version = version.into();
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.cache = None;
    }

    pub fn set_keep_prob(&mut self, keep_prob: f64) -> Result<()> {
        let mut c = self.config.clone();
        c.keep_prob = keep_prob;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        let mut c = self.config.clone();
        c.learning_rate = lr;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    fn check_batch(&self, batch: &InputBatch) -> Result<()> {
        if batch.rows != self.geometry.input.0 || batch.cols != self.geometry.input.1 {
            return Err(Error::ShapeMismatch(format!(
                "batch of {}×{} inputs, network expects {}×{}",
                batch.rows, batch.cols, self.geometry.input.0, self.geometry.input.1
            )));
        }
        if batch.len == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        Ok(())
    }

    /// Forward pass in the network's current mode. Train mode caches
    /// activations for [`Network::backward`] and updates running statistics;
    /// `seed` selects the dropout masks.
    pub fn forward(&mut self, batch: &InputBatch, seed: u64) -> Result<Tensor> {
        let out = self.forward_pass(batch, self.mode, seed, self.mode == Mode::Train)?;
        if let Some(cache) = &out.cache {
            let m = self.config.batchnorm_momentum;
            self.running[0].update(m, &cache.bn1);
            self.running[1].update(m, &cache.bn2);
            self.running[2].update(m, &cache.bn3);
        }
        self.cache = out.cache;
        Tensor::new(vec![batch.len, self.config.classes], out.probs)
    }

    /// Infer-mode class probabilities, `[n, 2]`.
    pub fn predict(&self, batch: &InputBatch) -> Result<Tensor> {
        let out = self.forward_pass(batch, Mode::Infer, 0, false)?;
        Tensor::new(vec![batch.len, self.config.classes], out.probs)
    }

    /// Per-sample shapes along the layer chain for one infer-mode pass.
    pub fn forward_shapes(&self, batch: &InputBatch) -> Result<Vec<StageShape>> {
        Ok(self.forward_pass(batch, Mode::Infer, 0, false)?.shapes)
    }

    /// Replaces the running statistics with population statistics over
    /// `batches`, measured in train mode with dropout disabled.
    ///
    /// Dropout inflates activation variance during training, so running
    /// statistics accumulated under dropout overstate the variance seen at
    /// inference. Re-estimating them without dropout removes that shift.
    pub fn recalibrate_batchnorm(&mut self, batches: &[InputBatch]) -> Result<()> {
        let sizes = [self.config.conv1_filters, self.config.conv2_filters, self.config.dense_hidden];
        let mut sum = sizes.map(|n| vec![0.0; n]);
        let mut sum_sq = sizes.map(|n| vec![0.0; n]);
        let mut total = 0.0;
        for batch in batches {
            let out = self.forward_impl(batch, Mode::Train, 1.0, 0, true)?;
            let cache = out.cache.expect("train pass caches");
            let w = batch.len as f64;
            for (layer, bn) in [&cache.bn1, &cache.bn2, &cache.bn3].into_iter().enumerate() {
                for (i, (m, v)) in bn.batch_mean.iter().zip(&bn.batch_var).enumerate() {
                    sum[layer][i] += w * m;
                    sum_sq[layer][i] += w * (v + m * m);
                }
            }
            total += w;
        }
        if total == 0.0 {
            return Err(Error::EmptyDataset);
        }
        for layer in 0..3 {
            let r = &mut self.running[layer];
            for i in 0..sizes[layer] {
                let mean = sum[layer][i] / total;
                r.mean[i] = mean;
                r.var[i] = (sum_sq[layer][i] / total - mean * mean).max(0.0);
            }
        }
        Ok(())
    }

    pub(crate) fn forward_pass(
        &self,
        batch: &InputBatch,
        mode: Mode,
        seed: u64,
        keep_cache: bool,
    ) -> Result<ForwardOutput> {
        self.forward_impl(batch, mode, self.config.keep_prob, seed, keep_cache)
    }

    fn forward_impl(
        &self,
        batch: &InputBatch,
        mode: Mode,
        keep: f64,
        seed: u64,
        keep_cache: bool,
    ) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let n = batch.len;
        if mode == Mode::Train && n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let c = &self.config;
        let g = self.geometry;
        let p = &self.params;
        let (f1, f2, hid, classes) = (c.conv1_filters, c.conv2_filters, c.dense_hidden, c.classes);
        let mut shapes = Vec::with_capacity(9);
        record(&mut shapes, "input", vec![1, g.input.0, g.input.1], batch.values.len(), n);

        let geom1 = ConvGeometry {
            batch: n,
            in_channels: 1,
            height: g.input.0,
            width: g.input.1,
            filters: f1,
        };
        let mut a1 = vec![0.0; geom1.output_len()];
        ops::conv2d_forward_raw(geom1, &batch.values, p[ParamId::Conv1Kernels].data(), None, &mut a1);
        record(&mut shapes, "conv1", vec![f1, g.conv1.0, g.conv1.1], a1.len(), n);
        let s1 = g.conv1.0 * g.conv1.1;
        let (bn1, mask1) = self.norm_activate(&mut a1, n, f1, s1, 0, mode, keep, derive_seed(seed, &[1]));

        let mut pool1 = vec![0.0; n * f1 * g.pool1.0 * g.pool1.1];
        let mut arg1 = vec![0u32; pool1.len()];
        ops::maxpool_raw(&a1, n * f1, g.conv1.0, g.conv1.1, &mut pool1, &mut arg1);
        record(&mut shapes, "pool1", vec![f1, g.pool1.0, g.pool1.1], pool1.len(), n);
        drop(a1);

        let geom2 = ConvGeometry {
            batch: n,
            in_channels: f1,
            height: g.pool1.0,
            width: g.pool1.1,
            filters: f2,
        };
        let mut a2 = vec![0.0; geom2.output_len()];
        ops::conv2d_forward_raw(geom2, &pool1, p[ParamId::Conv2Kernels].data(), None, &mut a2);
        record(&mut shapes, "conv2", vec![f2, g.conv2.0, g.conv2.1], a2.len(), n);
        let s2 = g.conv2.0 * g.conv2.1;
        let (bn2, mask2) = self.norm_activate(&mut a2, n, f2, s2, 1, mode, keep, derive_seed(seed, &[2]));

        let mut pool2 = vec![0.0; n * f2 * g.pool2.0 * g.pool2.1];
        let mut arg2 = vec![0u32; pool2.len()];
        ops::maxpool_raw(&a2, n * f2, g.conv2.0, g.conv2.1, &mut pool2, &mut arg2);
        record(&mut shapes, "pool2", vec![f2, g.pool2.0, g.pool2.1], pool2.len(), n);
        drop(a2);

        let d_in = g.dense_inputs();
        let mut flat = Vec::with_capacity(n * d_in);
        for (chunk, dur) in pool2.chunks_exact(g.flat).zip(&batch.durations) {
            flat.extend_from_slice(chunk);
            flat.push(*dur);
        }
        record(&mut shapes, "flatten+duration", vec![d_in], flat.len(), n);

        let mut a3 = vec![0.0; n * hid];
        ops::dense_forward_raw(&flat, n, d_in, p[ParamId::Dense1Weights].data(), hid, None, &mut a3);
        record(&mut shapes, "dense1", vec![hid], a3.len(), n);
        let (bn3, mask3) = self.norm_activate(&mut a3, n, hid, 1, 2, mode, keep, derive_seed(seed, &[3]));

        let mut logits = vec![0.0; n * classes];
        ops::dense_forward_raw(
            &a3,
            n,
            hid,
            p[ParamId::OutWeights].data(),
            classes,
            Some(p[ParamId::OutBias].data()),
            &mut logits,
        );
        record(&mut shapes, "logits", vec![classes], logits.len(), n);
        let mut probs = vec![0.0; logits.len()];
        ops::softmax_raw(&logits, classes, &mut probs);

        let cache = match (keep_cache, bn1, bn2, bn3) {
            (true, Some(bn1), Some(bn2), Some(bn3)) => Some(ForwardCache {
                n,
                input: batch.values.clone(),
                bn1,
                mask1,
                arg1,
                pool1,
                bn2,
                mask2,
                arg2,
                flat,
                bn3,
                mask3,
                hidden: a3,
                probs: probs.clone(),
            }),
            _ => None,
        };
        Ok(ForwardOutput {
            probs,
            cache,
            shapes,
        })
    }

    /// Batchnorm, ReLU and dropout applied in place to `[n, c, s]` activations.
    #[allow(clippy::too_many_arguments)]
    fn norm_activate(
        &self,
        x: &mut [f64],
        n: usize,
        c: usize,
        s: usize,
        layer: usize,
        mode: Mode,
        keep: f64,
        seed: u64,
    ) -> (Option<BatchNormCache>, Vec<bool>) {
        let (gamma, beta) = match layer {
            0 => (ParamId::Bn1Gamma, ParamId::Bn1Beta),
            1 => (ParamId::Bn2Gamma, ParamId::Bn2Beta),
            _ => (ParamId::Bn3Gamma, ParamId::Bn3Beta),
        };
        let (gamma, beta) = (self.params[gamma].data(), self.params[beta].data());
        match mode {
            Mode::Train => {
                let cache = ops::batchnorm_train_raw(x, n, c, s, gamma, beta, self.config.batchnorm_epsilon);
                let mask = ops::relu_dropout_raw(x, keep, seed);
                (Some(cache), mask)
            }
            Mode::Infer => {
                let r = &self.running[layer];
                let bn = ops::BatchNormParams {
                    gamma: gamma.to_vec(),
                    beta: beta.to_vec(),
                    running_mean: r.mean.clone(),
                    running_var: r.var.clone(),
                    momentum: self.config.batchnorm_momentum,
                    epsilon: self.config.batchnorm_epsilon,
                };
                ops::batchnorm_infer_raw(x, n, c, s, &bn);
                let mask = ops::relu_dropout_raw(x, 1.0, 0);
                (None, mask)
            }
        }
    }

    /// Gradients of the mean cross-entropy for the last train-mode forward.
    /// Consumes the cached activations.
    pub fn backward(&mut self, labels: &[usize]) -> Result<ParamSet> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::StateMismatch("no train-mode forward pass cached".into()))?;
        self.gradients(&cache, labels)
    }

    pub(crate) fn gradients(&self, cache: &ForwardCache, labels: &[usize]) -> Result<ParamSet> {
        let n = cache.n;
        if labels.len() != n {
            return Err(Error::StateMismatch(format!(
                "{} labels for a cached batch of {n}",
                labels.len()
            )));
        }
        let c = &self.config;
        if let Some(bad) = labels.iter().find(|&&y| y >= c.classes) {
            return Err(Error::ShapeMismatch(format!("label {bad} out of range")));
        }
        let g = self.geometry;
        let p = &self.params;
        let (f1, f2, hid, classes) = (c.conv1_filters, c.conv2_filters, c.dense_hidden, c.classes);
        let keep = c.keep_prob;
        let mut grads = self.params.zeros_like();

        let mut dlogits = cache.probs.clone();
        for (row, &y) in dlogits.chunks_exact_mut(classes).zip(labels) {
            row[y] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n as f64);
        }

        let mut dhidden = vec![0.0; n * hid];
        {
            let (w_out, b_out) = grads_pair(&mut grads, ParamId::OutWeights, ParamId::OutBias);
            ops::dense_backward_raw(
                &cache.hidden,
                n,
                hid,
                p[ParamId::OutWeights].data(),
                classes,
                &dlogits,
                w_out,
                Some(b_out),
                Some(&mut dhidden),
            );
        }
        ops::relu_dropout_backward_raw(&mut dhidden, &cache.mask3, keep);
        {
            let (dg, db) = grads_pair(&mut grads, ParamId::Bn3Gamma, ParamId::Bn3Beta);
            ops::batchnorm_backward_raw(&mut dhidden, n, hid, 1, p[ParamId::Bn3Gamma].data(), &cache.bn3, dg, db);
        }

        let d_in = g.dense_inputs();
        let mut dflat = vec![0.0; n * d_in];
        ops::dense_backward_raw(
            &cache.flat,
            n,
            d_in,
            p[ParamId::Dense1Weights].data(),
            hid,
            &dhidden,
            grads[ParamId::Dense1Weights].data_mut(),
            None,
            Some(&mut dflat),
        );

        let mut dpool2 = Vec::with_capacity(n * g.flat);
        for row in dflat.chunks_exact(d_in) {
            dpool2.extend_from_slice(&row[..g.flat]);
        }
        let s2 = g.conv2.0 * g.conv2.1;
        let mut da2 = vec![0.0; n * f2 * s2];
        ops::maxpool_backward_raw(&dpool2, &cache.arg2, &mut da2);
        ops::relu_dropout_backward_raw(&mut da2, &cache.mask2, keep);
        {
            let (dg, db) = grads_pair(&mut grads, ParamId::Bn2Gamma, ParamId::Bn2Beta);
            ops::batchnorm_backward_raw(&mut da2, n, f2, s2, p[ParamId::Bn2Gamma].data(), &cache.bn2, dg, db);
        }
        let geom2 = ConvGeometry {
            batch: n,
            in_channels: f1,
            height: g.pool1.0,
            width: g.pool1.1,
            filters: f2,
        };
        let mut dpool1 = vec![0.0; cache.pool1.len()];
        ops::conv2d_backward_raw(
            geom2,
            &cache.pool1,
            p[ParamId::Conv2Kernels].data(),
            &da2,
            grads[ParamId::Conv2Kernels].data_mut(),
            None,
            Some(&mut dpool1),
        );

        let s1 = g.conv1.0 * g.conv1.1;
        let mut da1 = vec![0.0; n * f1 * s1];
        ops::maxpool_backward_raw(&dpool1, &cache.arg1, &mut da1);
        ops::relu_dropout_backward_raw(&mut da1, &cache.mask1, keep);
        {
            let (dg, db) = grads_pair(&mut grads, ParamId::Bn1Gamma, ParamId::Bn1Beta);
            ops::batchnorm_backward_raw(&mut da1, n, f1, s1, p[ParamId::Bn1Gamma].data(), &cache.bn1, dg, db);
        }
        let geom1 = ConvGeometry {
            batch: n,
            in_channels: 1,
            height: g.input.0,
            width: g.input.1,
            filters: f1,
        };
        ops::conv2d_backward_raw(
            geom1,
            &cache.input,
            p[ParamId::Conv1Kernels].data(),
            &da1,
            grads[ParamId::Conv1Kernels].data_mut(),
            None,
            None,
        );
        Ok(grads)
    }
}

fn grads_pair(grads: &mut ParamSet, a: ParamId, b: ParamId) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.index() < b.index());
    let (lo, hi) = grads.tensors.split_at_mut(b.index());
    (lo[a.index()].data_mut(), hi[0].data_mut())
}
